"""Observations, confidence streams and batch indexing.

A stream carries ground truth (``is_drift`` flags and the changepoint) for
scoring, but detectors only ever receive ``stream.values``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_BATCH_SIZE = 20
STREAM_CSV_HEADER = ("t", "z", "is_drift", "label")


class StreamError(ValueError):
    """Malformed stream, batch request or stream file."""


@dataclass(frozen=True)
class Observation:
    t: int
    z: float
    is_drift: bool = False
    label: str = ""

    def __post_init__(self):
        if self.t < 1:
            raise StreamError(f"observation index must be >= 1, got {self.t}")
        if not 0.0 <= self.z <= 1.0 or math.isnan(self.z):
            raise StreamError(f"confidence z_{self.t}={self.z} outside [0, 1]")


def batch_of(t: int, batch_size: int = DEFAULT_BATCH_SIZE) -> int:
    """Batch index ``ceil(t / batch_size)`` of the 1-based observation index ``t``."""
    if t < 1:
        raise StreamError(f"observation index must be >= 1, got {t}")
    if batch_size < 1:
        raise StreamError(f"batch_size must be >= 1, got {batch_size}")
    return -(-t // batch_size)


def batch_bounds(j: int, batch_size: int = DEFAULT_BATCH_SIZE) -> tuple[int, int]:
    """First and last observation index (inclusive) of batch ``j``."""
    if j < 1:
        raise StreamError(f"batch index must be >= 1, got {j}")
    return batch_size * (j - 1) + 1, batch_size * j


@dataclass(frozen=True)
class ConfidenceStream:
    observations: tuple[Observation, ...]
    batch_size: int = DEFAULT_BATCH_SIZE
    changepoint: int | None = None
    _values: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        obs = tuple(self.observations)
        object.__setattr__(self, "observations", obs)
        if self.batch_size < 1:
            raise StreamError(f"batch_size must be >= 1, got {self.batch_size}")
        for i, o in enumerate(obs, start=1):
            if o.t != i:
                raise StreamError(f"indices must be contiguous from 1; position {i} has t={o.t}")
        if self.changepoint is not None:
            if self.changepoint < 0:
                raise StreamError("changepoint must be non-negative")
            early = [o.t for o in obs[: self.changepoint] if o.is_drift]
            if early:
                raise StreamError(f"drift observation at t={early[0]} precedes changepoint {self.changepoint}")
        values = np.fromiter((o.z for o in obs), dtype=float, count=len(obs))
        values.flags.writeable = False
        object.__setattr__(self, "_values", values)

    @classmethod
    def from_values(cls, z: Iterable[float], is_drift: Iterable[bool] | None = None,
                    labels: Iterable[str] | None = None, batch_size: int = DEFAULT_BATCH_SIZE,
                    changepoint: int | None = None) -> "ConfidenceStream":
        z = list(z)
        flags = list(is_drift) if is_drift is not None else [False] * len(z)
        labs = list(labels) if labels is not None else [""] * len(z)
        if not len(z) == len(flags) == len(labs):
            raise StreamError("z, is_drift and labels must have equal length")
        obs = tuple(Observation(t=i, z=float(v), is_drift=bool(f), label=str(lab))
                    for i, (v, f, lab) in enumerate(zip(z, flags, labs), start=1))
        return cls(obs, batch_size=batch_size, changepoint=changepoint)

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def values(self) -> np.ndarray:
        """Read-only array of confidences; the only thing a detector sees."""
        return self._values

    @property
    def drift_flags(self) -> np.ndarray:
        return np.fromiter((o.is_drift for o in self.observations), dtype=bool, count=len(self))

    @property
    def num_batches(self) -> int:
        return len(self) // self.batch_size

    @property
    def change_batch(self) -> int | None:
        if self.changepoint is None:
            return None
        return batch_of(self.changepoint, self.batch_size) if self.changepoint else 0

    def batch_slice(self, j: int) -> tuple[Observation, ...]:
        """Observations of batch ``j``; raises if the batch is incomplete."""
        lo, hi = batch_bounds(j, self.batch_size)
        if hi > len(self):
            missing = max(lo, len(self) + 1)
            raise StreamError(f"batch {j} is incomplete: observation t={missing} is missing")
        return self.observations[lo - 1: hi]

    def batches(self) -> list[tuple[Observation, ...]]:
        return [self.batch_slice(j) for j in range(1, self.num_batches + 1)]


def read_stream_csv(path: str | Path, batch_size: int = DEFAULT_BATCH_SIZE,
                    changepoint: int | None = None) -> ConfidenceStream:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames[:4]) != STREAM_CSV_HEADER:
            raise StreamError(f"{path}: expected header {','.join(STREAM_CSV_HEADER)}")
        obs = []
        for line, row in enumerate(reader, start=2):
            try:
                flag = row["is_drift"].strip()
                if flag not in ("0", "1"):
                    raise ValueError(f"is_drift must be 0 or 1, got {flag!r}")
                obs.append(Observation(t=int(row["t"]), z=float(row["z"]),
                                       is_drift=flag == "1", label=row["label"] or ""))
            except (ValueError, StreamError) as exc:
                raise StreamError(f"{path}:{line}: {exc}") from exc
    return ConfidenceStream(tuple(obs), batch_size=batch_size, changepoint=changepoint)


def write_stream_csv(stream: ConfidenceStream, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STREAM_CSV_HEADER)
        for o in stream.observations:
            writer.writerow([o.t, repr(o.z), int(o.is_drift), o.label])


def as_values(z: Sequence[float] | np.ndarray) -> np.ndarray:
    """Coerce a detector input to a 1-d float array."""
    arr = np.asarray(z, dtype=float)
    if arr.ndim != 1:
        raise StreamError("expected a 1-d sequence of values")
    return arr
