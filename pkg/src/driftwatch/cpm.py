"""Change Point Model detector: split scanning, threshold calibration, online loop."""

from __future__ import annotations

import enum
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import isotonic_regression

from .statistics import (
    DEFAULT_MIN_SEGMENT,
    DEFAULT_MOMENTS,
    MomentSource,
    StatisticKind,
    normalize_statistic,
    split_statistics,
)
from .stream import as_values

DEFAULT_T0 = 25
MIN_SURVIVORS = 10
_CALIBRATION_CHUNK = 250

INF = math.inf


class AlphaMode(str, enum.Enum):
    PER_EVALUATION_HAZARD = "per_evaluation_hazard"
    HORIZON_TOTAL = "horizon_total"


class CalibrationError(RuntimeError):
    pass


class ThresholdTableError(ValueError):
    pass


def evaluation_points(t0: int, horizon: int, stride: int = 1,
                      min_segment: int = DEFAULT_MIN_SEGMENT) -> np.ndarray:
    """Times ``t0 <= t <= horizon`` with ``t % stride == 0`` at which the CPM tests."""
    start = max(t0, 2 * min_segment)
    first = -(-start // stride) * stride
    return np.arange(first, horizon + 1, stride, dtype=np.int64)


def candidate_splits(t: int, stride: int = 1, min_segment: int = DEFAULT_MIN_SEGMENT) -> np.ndarray:
    first = -(-min_segment // stride) * stride
    return np.arange(first, t - min_segment + 1, stride, dtype=np.int64)


def _split_scores(kind, z, t, candidate_stride, min_segment, moments):
    ks = candidate_splits(t, candidate_stride, min_segment)
    if ks.size == 0:
        raise ValueError(f"no candidate split at t={t} with stride {candidate_stride} "
                         f"and minimum segment {min_segment}")
    raw = split_statistics(kind, z[..., :t], ks)
    return ks, normalize_statistic(kind, raw, ks, t - ks, moments)


def scan_splits(kind: StatisticKind | str, z: Sequence[float], candidate_stride: int = 1,
                min_segment: int = DEFAULT_MIN_SEGMENT,
                moments: MomentSource = DEFAULT_MOMENTS) -> tuple[int, float]:
    """Most significant split of ``z``: ``(tau, W_tau)``, ties to the smallest ``tau``."""
    z = as_values(z)
    if len(z) < 2 * min_segment:
        raise ValueError(f"need at least {2 * min_segment} observations to split, got {len(z)}")
    ks, w = _split_scores(kind, z, len(z), candidate_stride, min_segment, moments)
    best = int(np.argmax(w))
    return int(ks[best]), float(w[best])


@dataclass(frozen=True, eq=False)
class ThresholdTable:
    statistic_kind: StatisticKind
    alpha_mode: AlphaMode
    alpha: float
    t0: int
    horizon: int
    evaluation_stride: int
    candidate_stride: int
    times: np.ndarray
    values: np.ndarray
    num_streams: int
    seed: int
    min_segment: int = DEFAULT_MIN_SEGMENT

    def __post_init__(self):
        object.__setattr__(self, "statistic_kind", StatisticKind.parse(self.statistic_kind))
        object.__setattr__(self, "alpha_mode", AlphaMode(self.alpha_mode))
        times = np.asarray(self.times, dtype=np.int64)
        values = np.asarray(self.values, dtype=float)
        if times.shape != values.shape or times.ndim != 1 or times.size == 0:
            raise ThresholdTableError("times and values must be equal-length non-empty 1-d arrays")
        if not np.all(np.isfinite(values)):
            raise ThresholdTableError("threshold values must be finite")
        if np.any(np.diff(times) <= 0):
            raise ThresholdTableError("evaluation times must be strictly increasing")
        if np.any(np.diff(values) < 0):
            bad = int(np.argmax(np.diff(values) < 0)) + 1
            raise ThresholdTableError(f"thresholds must be nondecreasing; h drops at t={times[bad]}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_index", {int(t): i for i, t in enumerate(times)})

    @property
    def alpha_eval(self) -> float:
        return per_evaluation_alpha(self.alpha_mode, self.alpha, len(self.times))

    def is_evaluation_point(self, t: int) -> bool:
        return t in self._index

    def threshold(self, t: int) -> float:
        try:
            return float(self.values[self._index[t]])
        except KeyError:
            raise KeyError(f"t={t} is not an evaluation point of this table") from None

    def as_dict(self) -> dict:
        return {
            "statistic_kind": self.statistic_kind.value,
            "alpha_mode": self.alpha_mode.value,
            "alpha": self.alpha,
            "t0": self.t0,
            "horizon": self.horizon,
            "evaluation_stride": self.evaluation_stride,
            "candidate_stride": self.candidate_stride,
            "num_streams": self.num_streams,
            "seed": self.seed,
            "min_segment": self.min_segment,
            "values": [[int(t), float(h)] for t, h in zip(self.times, self.values)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ThresholdTable":
        try:
            pairs = data["values"]
            return cls(
                statistic_kind=data["statistic_kind"], alpha_mode=data["alpha_mode"],
                alpha=float(data["alpha"]), t0=int(data["t0"]), horizon=int(data["horizon"]),
                evaluation_stride=int(data["evaluation_stride"]),
                candidate_stride=int(data["candidate_stride"]),
                times=[p[0] for p in pairs], values=[p[1] for p in pairs],
                num_streams=int(data["num_streams"]), seed=int(data["seed"]),
                min_segment=int(data.get("min_segment", DEFAULT_MIN_SEGMENT)),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ThresholdTableError(f"malformed threshold table: {exc!r}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ThresholdTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class CalibrationSpec:
    """Everything that determines a threshold table except alpha."""

    kind: StatisticKind
    t0: int = DEFAULT_T0
    horizon: int = 2000
    evaluation_stride: int = 20
    candidate_stride: int = 20
    num_streams: int = 2000
    seed: int = 0
    min_segment: int = DEFAULT_MIN_SEGMENT

    def __post_init__(self):
        object.__setattr__(self, "kind", StatisticKind.parse(self.kind))
        if self.t0 >= self.horizon:
            raise ValueError(f"t0={self.t0} must be below horizon={self.horizon}")
        if min(self.evaluation_stride, self.candidate_stride, self.num_streams, self.min_segment) < 1:
            raise ValueError("strides, num_streams and min_segment must be positive")

    @property
    def times(self) -> np.ndarray:
        return evaluation_points(self.t0, self.horizon, self.evaluation_stride, self.min_segment)


def table_filename(spec: CalibrationSpec, alpha_mode: AlphaMode | str, alpha: float) -> str:
    key = json.dumps([spec.kind.value, AlphaMode(alpha_mode).value, alpha, spec.t0, spec.horizon,
                      spec.evaluation_stride, spec.candidate_stride, spec.num_streams, spec.seed,
                      spec.min_segment])
    digest = hashlib.sha256(key.encode()).hexdigest()[:12]
    return f"{spec.kind.value}_{AlphaMode(alpha_mode).value}_a{alpha:g}_h{spec.horizon}_{digest}.json"


def per_evaluation_alpha(alpha_mode: AlphaMode | str, alpha: float, num_points: int) -> float:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if AlphaMode(alpha_mode) is AlphaMode.PER_EVALUATION_HAZARD:
        return alpha
    return -math.expm1(math.log1p(-alpha) / num_points)


def null_streams(kind: StatisticKind | str, seed: int, start: int, stop: int, length: int) -> np.ndarray:
    """Null streams ``start..stop-1``; stream ``i`` depends only on ``(seed, i)``."""
    kind = StatisticKind.parse(kind)
    rows = []
    for i in range(start, stop):
        rng = np.random.default_rng([seed, i])
        rows.append(rng.random(length) if kind is StatisticKind.CVM else rng.standard_normal(length))
    return np.array(rows)


def max_statistic_paths(kind: StatisticKind | str, z: np.ndarray, times: Sequence[int],
                        candidate_stride: int, min_segment: int = DEFAULT_MIN_SEGMENT,
                        moments: MomentSource = DEFAULT_MOMENTS) -> np.ndarray:
    """``W_t`` (max normalized split statistic) for each stream row and each ``t`` in ``times``."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    out = np.empty((len(z), len(times)))
    for e, t in enumerate(times):
        _, w = _split_scores(kind, z, int(t), candidate_stride, min_segment, moments)
        out[:, e] = w.max(axis=1)
    return out


def _paths_chunk(args):
    spec, moments, start, stop = args
    z = null_streams(spec.kind, spec.seed, start, stop, spec.horizon)
    return max_statistic_paths(spec.kind, z, spec.times, spec.candidate_stride, spec.min_segment, moments)


def simulate_null_paths(spec: CalibrationSpec, moments: MomentSource = DEFAULT_MOMENTS,
                        jobs: int = 1) -> np.ndarray:
    """``(num_streams, len(spec.times))`` matrix of null ``W_t`` paths.

    Work is split in fixed-size chunks so the result does not depend on ``jobs``.
    """
    tasks = [(spec, moments, a, min(a + _CALIBRATION_CHUNK, spec.num_streams))
             for a in range(0, spec.num_streams, _CALIBRATION_CHUNK)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_paths_chunk, tasks))
    else:
        parts = [_paths_chunk(t) for t in tasks]
    return np.concatenate(parts)


def _sequential_quantiles(paths, thresholds, alpha_eval, min_survivors):
    """``1 - alpha_eval`` quantile at each time among streams that never exceeded ``thresholds`` before."""
    alive = np.ones(len(paths), dtype=bool)
    q = np.empty(paths.shape[1])
    for e in range(paths.shape[1]):
        n_alive = int(alive.sum())
        if n_alive < min_survivors:
            raise CalibrationError(
                f"only {n_alive} null streams survive to evaluation point {e + 1} of {paths.shape[1]}; "
                "increase num_streams or lower alpha")
        q[e] = np.quantile(paths[alive, e], 1.0 - alpha_eval)
        if thresholds is None:
            thresholds_e = q[e]
        else:
            thresholds_e = thresholds[e]
        alive &= paths[:, e] <= thresholds_e
    return q


def thresholds_from_paths(paths: np.ndarray, alpha_eval: float, min_survivors: int = MIN_SURVIVORS,
                          max_iter: int = 50) -> np.ndarray:
    """Sequential quantile-and-eliminate pass over null paths, made nondecreasing.

    The raw pass sets each threshold to the ``1 - alpha_eval`` quantile of the
    streams still alive and removes the ones above it. Quantile noise makes
    that sequence jitter, so it is replaced by its isotonic fit and the pass is
    repeated with eliminations driven by the fitted thresholds until the fit
    stops moving.
    """
    h = isotonic_regression(_sequential_quantiles(paths, None, alpha_eval, min_survivors)).x
    for _ in range(max_iter):
        fitted = isotonic_regression(_sequential_quantiles(paths, h, alpha_eval, min_survivors)).x
        if np.array_equal(fitted, h):
            break
        h = fitted
    return h


def tables_from_paths(spec: CalibrationSpec, paths: np.ndarray, alpha_mode: AlphaMode | str,
                      alphas: Sequence[float]) -> list[ThresholdTable]:
    times = spec.times
    tables = []
    for alpha in alphas:
        h = thresholds_from_paths(paths, per_evaluation_alpha(alpha_mode, alpha, len(times)))
        tables.append(ThresholdTable(
            statistic_kind=spec.kind, alpha_mode=alpha_mode, alpha=alpha, t0=spec.t0,
            horizon=spec.horizon, evaluation_stride=spec.evaluation_stride,
            candidate_stride=spec.candidate_stride, times=times, values=h,
            num_streams=spec.num_streams, seed=spec.seed, min_segment=spec.min_segment))
    return tables


def calibrate_thresholds(kind: StatisticKind | str, alpha_mode: AlphaMode | str = AlphaMode.HORIZON_TOTAL,
                         alpha: float = 0.05, t0: int = DEFAULT_T0, horizon: int = 2000,
                         evaluation_stride: int = 20, candidate_stride: int = 20,
                         num_streams: int = 2000, seed: int = 0,
                         min_segment: int = DEFAULT_MIN_SEGMENT,
                         moments: MomentSource = DEFAULT_MOMENTS, jobs: int = 1) -> ThresholdTable:
    """Monte-Carlo critical values ``h_t`` for one statistic and alpha setting."""
    spec = CalibrationSpec(kind, t0, horizon, evaluation_stride, candidate_stride, num_streams,
                           seed, min_segment)
    paths = simulate_null_paths(spec, moments, jobs)
    return tables_from_paths(spec, paths, alpha_mode, [alpha])[0]


def first_crossing(paths: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Index of the first evaluation point where each path exceeds its threshold, or -1."""
    above = paths > thresholds[None, :]
    hit = above.any(axis=1)
    return np.where(hit, above.argmax(axis=1), -1)


# ------------------------------------------------------------------ online

@dataclass(frozen=True)
class DetectionOutcome:
    d: float = INF
    k_hat: float = INF
    w_max: float = math.nan

    def __post_init__(self):
        if math.isinf(self.d) != math.isinf(self.k_hat):
            raise ValueError("d and k_hat must both be finite or both infinite")
        if not math.isinf(self.d) and not self.k_hat < self.d:
            raise ValueError(f"k_hat={self.k_hat} must precede d={self.d}")

    @property
    def detected(self) -> bool:
        return not math.isinf(self.d)

    def as_dict(self) -> dict:
        enc = (lambda v: None if math.isinf(v) else int(v))
        return {"d": enc(self.d), "k_hat": enc(self.k_hat),
                "w_max": None if math.isnan(self.w_max) else self.w_max}


class Status(str, enum.Enum):
    WARMING = "warming"
    MONITORING = "monitoring"
    DETECTED = "detected"


# (values observed so far, tau, t) -> accept the detection?
DetectionGate = Callable[[np.ndarray, int, int], bool]


@dataclass
class CpmState:
    """Online CPM over one stream.

    ``gate``, when given, can veto an exceedance (monitoring then continues);
    it sees only the observed values, never ground truth.
    """

    threshold_table: ThresholdTable
    moments: MomentSource = DEFAULT_MOMENTS
    confidence: bool = True
    gate: DetectionGate | None = None
    observed: list[float] = field(default_factory=list)
    status: Status = Status.WARMING
    detection: DetectionOutcome | None = None
    vetoed: int = 0

    @property
    def t(self) -> int:
        return len(self.observed)

    def step(self, z_next: float) -> "CpmState":
        if self.status is Status.DETECTED:
            raise RuntimeError("change already detected; start a fresh CpmState")
        z_next = float(z_next)
        if self.confidence and not 0.0 <= z_next <= 1.0:
            raise ValueError(f"confidence {z_next} outside [0, 1]")
        table = self.threshold_table
        if self.t + 1 > table.horizon:
            raise ValueError(f"stream exceeds the threshold table horizon ({table.horizon})")
        self.observed.append(z_next)
        t = self.t
        if t < table.t0:
            return self
        self.status = Status.MONITORING
        if not table.is_evaluation_point(t):
            return self
        tau, w = scan_splits(table.statistic_kind, self.observed, table.candidate_stride,
                             table.min_segment, self.moments)
        if w > table.threshold(t):
            if self.gate is not None and not self.gate(np.asarray(self.observed), tau, t):
                self.vetoed += 1
                return self
            self.status = Status.DETECTED
            self.detection = DetectionOutcome(d=t, k_hat=tau, w_max=w)
        return self

    def outcome(self) -> DetectionOutcome:
        return self.detection if self.detection is not None else DetectionOutcome()


def cpm_step(state: CpmState, z_next: float) -> CpmState:
    return state.step(z_next)


def run_cpm(z: Sequence[float], table: ThresholdTable, moments: MomentSource = DEFAULT_MOMENTS,
            gate: DetectionGate | None = None, confidence: bool = True) -> DetectionOutcome:
    """Feed a whole stream through a fresh ``CpmState``; stops at the first detection."""
    state = CpmState(table, moments=moments, gate=gate, confidence=confidence)
    for value in as_values(z)[: table.horizon]:
        state.step(value)
        if state.status is Status.DETECTED:
            break
    return state.outcome()
