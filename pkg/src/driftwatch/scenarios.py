"""Drift scenarios (per-batch contamination schedules) and stream synthesis."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .stream import ConfidenceStream, Observation

DEFAULT_CHANGE_BATCH = 50
DEFAULT_TOTAL_BATCHES = 100
POOL_CSV_HEADER = ("z", "label", "pool")


def _sudden(level, stop=None):
    return lambda m: level if m >= 1 and (stop is None or m <= stop) else 0.0


def _gradual(level, ramp):
    return lambda m: 0.0 if m < 1 else (m / 20 if m <= ramp else level)


def _long_delay(m):
    return 0.0 if m < 1 else min(1.0, math.ceil(m / 3) / 20)


# p as a function of m = j - change_batch
_SCHEDULES = {
    "sudden_quarter": _sudden(0.25),
    "sudden_half": _sudden(0.5),
    "sudden_full": _sudden(1.0),
    "sudden_half_return": _sudden(0.5, stop=15),
    "sudden_full_return": _sudden(1.0, stop=15),
    "gradual_to_half": _gradual(0.5, ramp=10),
    "gradual_to_full": _gradual(1.0, ramp=20),
    "gradual_long_delay": _long_delay,
}

SCENARIO_NAMES = tuple(_SCHEDULES)

ABBREVIATIONS = {
    "sudden_quarter": "S_25%",
    "sudden_half": "S_50%",
    "sudden_full": "S_100%",
    "sudden_half_return": "SR_50%",
    "sudden_full_return": "SR_100%",
    "gradual_to_half": "G_50%",
    "gradual_to_full": "G_100%",
    "gradual_long_delay": "G_LD",
    "custom": "custom",
}

_ALIASES = {"gradual_half_return": "sudden_half_return"}


class ScenarioError(ValueError):
    pass


def canonical_name(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in _SCHEDULES and name != "custom":
        raise ScenarioError(f"unknown scenario {name!r}; expected one of {', '.join(SCENARIO_NAMES)}")
    return name


def schedule(name: str, j: int, change_batch: int = DEFAULT_CHANGE_BATCH,
             total_batches: int = DEFAULT_TOTAL_BATCHES) -> float:
    """Contamination proportion ``p_j`` of batch ``j`` under a named scenario."""
    name = canonical_name(name)
    if name == "custom":
        raise ScenarioError("custom scenarios carry an explicit schedule; use DriftScenario")
    if not 1 <= j <= total_batches:
        raise ScenarioError(f"batch {j} outside 1..{total_batches}")
    return _SCHEDULES[name](j - change_batch)


@dataclass(frozen=True)
class DriftScenario:
    name: str
    schedule: tuple[float, ...]
    change_batch: int = DEFAULT_CHANGE_BATCH

    def __post_init__(self):
        object.__setattr__(self, "schedule", tuple(float(p) for p in self.schedule))
        if not 0 <= self.change_batch <= len(self.schedule):
            raise ScenarioError("change_batch must lie within the schedule")
        if any(not 0.0 <= p <= 1.0 for p in self.schedule):
            raise ScenarioError("contamination proportions must lie in [0, 1]")
        if any(p > 0 for p in self.schedule[: self.change_batch]):
            raise ScenarioError("contamination before the change batch must be zero")

    @classmethod
    def named(cls, name: str, change_batch: int = DEFAULT_CHANGE_BATCH,
              total_batches: int = DEFAULT_TOTAL_BATCHES) -> "DriftScenario":
        name = canonical_name(name)
        return cls(name, tuple(schedule(name, j, change_batch, total_batches)
                               for j in range(1, total_batches + 1)), change_batch)

    @classmethod
    def from_json(cls, path: str | Path, name: str = "custom") -> "DriftScenario":
        data = json.loads(Path(path).read_text())
        sched = data["schedule"]
        if int(data.get("total_batches", len(sched))) != len(sched):
            raise ScenarioError("total_batches does not match the schedule length")
        return cls(name, tuple(sched), int(data["change_batch"]))

    @property
    def total_batches(self) -> int:
        return len(self.schedule)

    @property
    def label(self) -> str:
        return ABBREVIATIONS.get(self.name, self.name)

    def p(self, j: int) -> float:
        if not 1 <= j <= self.total_batches:
            raise ScenarioError(f"batch {j} outside 1..{self.total_batches}")
        return self.schedule[j - 1]


@dataclass(frozen=True)
class ConfidenceSource:
    """Where base and drift-class confidences come from.

    ``beta_synthetic`` draws from Beta laws; ``pool_csv`` resamples (with
    replacement) from fixed pools of ``(z, label)`` pairs.
    """

    kind: str = "beta_synthetic"
    base_params: tuple[float, float] = (8.0, 2.0)
    drift_params: tuple[float, float] = (2.0, 2.0)
    base_pool: tuple[tuple[float, str], ...] = field(default=(), repr=False)
    drift_pool: tuple[tuple[float, str], ...] = field(default=(), repr=False)

    def __post_init__(self):
        if self.kind == "beta_synthetic":
            if min(*self.base_params, *self.drift_params) <= 0:
                raise ScenarioError("Beta shape parameters must be positive")
        elif self.kind == "pool_csv":
            if not self.base_pool:
                raise ScenarioError("base pool is empty")
            for z, _ in (*self.base_pool, *self.drift_pool):
                if not 0.0 <= z <= 1.0:
                    raise ScenarioError(f"pool confidence {z} outside [0, 1]")
        else:
            raise ScenarioError(f"unknown source kind {self.kind!r}")

    @classmethod
    def preset(cls, name: str) -> "ConfidenceSource":
        presets = {
            "default": cls(),
            "overconfident": cls(drift_params=(20.0, 1.0)),
        }
        try:
            return presets[name]
        except KeyError:
            raise ScenarioError(f"unknown source preset {name!r}; expected one of {sorted(presets)}") from None

    def _draw(self, rng: np.random.Generator, drift: bool, n: int) -> list[tuple[float, str]]:
        if n == 0:
            return []
        if self.kind == "beta_synthetic":
            a, b = self.drift_params if drift else self.base_params
            tag = "drift" if drift else "base"
            return [(float(v), tag) for v in rng.beta(a, b, n)]
        pool = self.drift_pool if drift else self.base_pool
        if not pool:
            raise ScenarioError("scenario needs drift observations but the drift pool is empty")
        return [pool[i] for i in rng.integers(0, len(pool), n)]


def read_pool_csv(path: str | Path) -> ConfidenceSource:
    base, drift = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames[:3]) != POOL_CSV_HEADER:
            raise ScenarioError(f"{path}: expected header {','.join(POOL_CSV_HEADER)}")
        for line, row in enumerate(reader, start=2):
            try:
                z = float(row["z"])
            except ValueError:
                raise ScenarioError(f"{path}:{line}: bad confidence {row['z']!r}") from None
            if not 0.0 <= z <= 1.0:
                raise ScenarioError(f"{path}:{line}: confidence {z} outside [0, 1]")
            target = {"base": base, "drift": drift}.get(row["pool"].strip())
            if target is None:
                raise ScenarioError(f"{path}:{line}: pool must be 'base' or 'drift', got {row['pool']!r}")
            target.append((z, row["label"] or ""))
    return ConfidenceSource(kind="pool_csv", base_pool=tuple(base), drift_pool=tuple(drift))


def drift_count(batch_size: int, p: float) -> int:
    """``round(batch_size * p)`` with halves rounded up."""
    return int(math.floor(batch_size * p + 0.5 + 1e-9))


def synthesize_stream(scenario: DriftScenario, source: ConfidenceSource, batch_size: int = 20,
                      seed: int | Sequence[int] = 0) -> ConfidenceStream:
    """Build a stream with exactly ``round(batch_size * p_j)`` drift values per batch.

    Positions within each batch are shuffled; the changepoint is the last
    index of the change batch.
    """
    rng = np.random.default_rng(seed)
    obs = []
    for j, p in enumerate(scenario.schedule, start=1):
        n_drift = drift_count(batch_size, p)
        values = [(z, lab, False) for z, lab in source._draw(rng, False, batch_size - n_drift)]
        values += [(z, lab, True) for z, lab in source._draw(rng, True, n_drift)]
        offset = (j - 1) * batch_size
        for pos, i in enumerate(rng.permutation(batch_size), start=1):
            z, lab, flag = values[i]
            obs.append(Observation(t=offset + pos, z=z, is_drift=flag, label=lab))
    return ConfidenceStream(tuple(obs), batch_size=batch_size,
                            changepoint=scenario.change_batch * batch_size)
