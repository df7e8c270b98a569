"""Two-sample statistics and their null moments.

Each statistic comes in two forms: ``two_sample_statistic`` evaluates one
pair of samples straight from the definition, while ``split_statistics``
evaluates every requested before/after split of many prefixes at once and
is what the detector and the calibration loop use.
"""

from __future__ import annotations

import enum
import math
from typing import Protocol, Sequence

import numpy as np
from scipy import special

DEFAULT_MIN_SEGMENT = 2

# Upper bound on elements of the (streams, candidates, t) scratch array.
_CHUNK_ELEMENTS = 4_000_000


class StatisticKind(str, enum.Enum):
    CVM = "cvm"
    STUDENT_T = "student_t"

    @classmethod
    def parse(cls, value: "str | StatisticKind") -> "StatisticKind":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "_")
        aliases = {"cramer_von_mises": "cvm", "cramervonmises": "cvm", "studentt": "student_t",
                   "t": "student_t"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown statistic kind {value!r}; expected one of "
                             f"{[k.value for k in cls]}") from None


class DegenerateSampleError(ArithmeticError):
    """A statistic is undefined for the given samples (e.g. zero pooled variance)."""


class MissingMomentsError(LookupError):
    pass


# ---------------------------------------------------------------- single pair

def _cvm_direct(x: np.ndarray, y: np.ndarray) -> float:
    n, m = len(x), len(y)
    pooled = np.concatenate([x, y])
    f = np.searchsorted(np.sort(x), pooled, side="right") / n
    g = np.searchsorted(np.sort(y), pooled, side="right") / m
    return float(n * m / (n + m) ** 2 * np.sum((f - g) ** 2))


def _student_t_direct(x: np.ndarray, y: np.ndarray) -> float:
    n, m = len(x), len(y)
    ss = np.sum((x - x.mean()) ** 2) + np.sum((y - y.mean()) ** 2)
    pooled_var = ss / (n + m - 2)
    scale = max(np.max(np.abs(x)), np.max(np.abs(y)), 1.0)
    if pooled_var <= 1e-24 * scale**2:
        raise DegenerateSampleError("zero pooled variance: Student-T statistic undefined")
    return float(abs(x.mean() - y.mean()) / math.sqrt(pooled_var * (1.0 / n + 1.0 / m)))


def two_sample_statistic(kind: StatisticKind | str, sample0: Sequence[float], sample1: Sequence[float],
                         min_segment: int = DEFAULT_MIN_SEGMENT) -> float:
    """Raw (un-normalized) two-sample statistic.

    ``cvm`` is ``n*m/(n+m)**2 * sum((F_n - G_m)**2)`` over all pooled points,
    with right-continuous empirical CDFs, so tied values are counted together.
    ``student_t`` is the absolute pooled-variance t statistic.
    """
    kind = StatisticKind.parse(kind)
    x = np.asarray(sample0, dtype=float)
    y = np.asarray(sample1, dtype=float)
    if len(x) < min_segment or len(y) < min_segment:
        raise ValueError(f"both samples need at least {min_segment} values, got {len(x)} and {len(y)}")
    if kind is StatisticKind.CVM:
        return _cvm_direct(x, y)
    return _student_t_direct(x, y)


# ------------------------------------------------------------ many splits

def _tie_group_ends(sorted_z: np.ndarray) -> np.ndarray | None:
    """For each sorted position, 1-based count of values <= that value; None if no ties."""
    same = sorted_z[:, 1:] == sorted_z[:, :-1]
    if not same.any():
        return None
    s, t = sorted_z.shape
    idx = np.broadcast_to(np.arange(1, t + 1), (s, t))
    is_end = np.concatenate([~same, np.ones((s, 1), dtype=bool)], axis=1)
    ends = np.where(is_end, idx, t + 1)
    return np.minimum.accumulate(ends[:, ::-1], axis=1)[:, ::-1]


def _cvm_splits(z: np.ndarray, ks: np.ndarray) -> np.ndarray:
    s, t = z.shape
    order = np.argsort(z, axis=1, kind="stable")
    ends = _tie_group_ends(np.take_along_axis(z, order, axis=1))
    # counts[i, c, p]: how many of the first p+1 sorted values come from the prefix of length ks[c]
    in_head = order[:, None, :] < ks[None, :, None]
    counts = np.cumsum(in_head, axis=2, dtype=np.int32)
    if ends is None:
        below = np.arange(1, t + 1, dtype=float)
    else:
        counts = np.take_along_axis(counts, np.broadcast_to(ends[:, None, :] - 1, counts.shape), axis=2)
        below = ends[:, None, :].astype(float)
    k = ks.astype(float)[None, :, None]
    diff = counts / k - (below - counts) / (t - k)
    total = np.einsum("ijk,ijk->ij", diff, diff)
    return (ks * (t - ks) / t**2)[None, :] * total


def _student_t_splits(z: np.ndarray, ks: np.ndarray) -> np.ndarray:
    s, t = z.shape
    centered = z - z.mean(axis=1, keepdims=True)
    c1 = np.cumsum(centered, axis=1)
    c2 = np.cumsum(centered**2, axis=1)
    k = ks.astype(float)
    sum0, sq0 = c1[:, ks - 1], c2[:, ks - 1]
    sum1, sq1 = c1[:, -1:] - sum0, c2[:, -1:] - sq0
    mean0, mean1 = sum0 / k, sum1 / (t - k)
    ss = (sq0 - k * mean0**2) + (sq1 - (t - k) * mean1**2)
    pooled_var = ss / (t - 2)
    scale = np.maximum(c2[:, -1:] / t, 1e-300)
    if np.any(pooled_var <= 1e-20 * scale) or np.any(c2[:, -1] == 0.0):
        raise DegenerateSampleError("zero pooled variance in a split: Student-T statistic undefined")
    return np.abs(mean0 - mean1) / np.sqrt(pooled_var * (1.0 / k + 1.0 / (t - k)))


def split_statistics(kind: StatisticKind | str, z: np.ndarray, ks: Sequence[int]) -> np.ndarray:
    """Raw statistic for every split ``z[:, :k]`` vs ``z[:, k:]``, ``k`` in ``ks``.

    ``z`` is ``(streams, t)`` (or 1-d for a single stream); returns
    ``(streams, len(ks))`` (or 1-d).
    """
    kind = StatisticKind.parse(kind)
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    if single:
        z = z[None, :]
    ks = np.asarray(ks, dtype=np.int64)
    t = z.shape[1]
    if ks.size == 0 or ks.min() < 1 or ks.max() > t - 1:
        raise ValueError(f"split points must lie in [1, {t - 1}]")
    if kind is StatisticKind.STUDENT_T:
        out = _student_t_splits(z, ks)
    else:
        rows = max(1, _CHUNK_ELEMENTS // (len(ks) * t))
        out = np.concatenate([_cvm_splits(z[i:i + rows], ks) for i in range(0, len(z), rows)])
    return out[0] if single else out


# -------------------------------------------------------------- moments

class MomentSource(Protocol):
    def moments(self, kind: StatisticKind, n0: int, n1: int) -> tuple[np.ndarray, np.ndarray]:
        """Null mean and standard deviation of the raw statistic at sizes ``(n0, n1)``."""
        ...


class ClosedFormMoments:
    """Exact finite-sample null moments for continuous data.

    CvM uses Anderson's (1962) mean and variance of the two-sample statistic.
    Student-T uses the folded t distribution with ``n0 + n1 - 2`` degrees of
    freedom, which needs at least three.
    """

    def moments(self, kind, n0, n1):
        kind = StatisticKind.parse(kind)
        n = np.asarray(n0, dtype=float)
        m = np.asarray(n1, dtype=float)
        total = n + m
        if kind is StatisticKind.CVM:
            mean = 1.0 / 6.0 + 1.0 / (6.0 * total)
            var = ((total + 1.0) / (45.0 * total**2)
                   * (4.0 * m * n * total - 3.0 * (m**2 + n**2) - 2.0 * m * n) / (4.0 * m * n))
            return mean, np.sqrt(var)
        dof = total - 2.0
        if np.any(dof <= 2):
            raise MissingMomentsError("folded-t variance needs n0 + n1 > 4; use MonteCarloMoments")
        log_ratio = special.gammaln((dof + 1) / 2) - special.gammaln(dof / 2)
        mean = 2.0 * np.sqrt(dof) * np.exp(log_ratio) / (np.sqrt(np.pi) * (dof - 1.0))
        var = dof / (dof - 2.0) - mean**2
        return mean, np.sqrt(var)


class MonteCarloMoments:
    """Empirical null moments, simulated on demand and cached per ``(kind, n0, n1)``.

    Null samples are standard uniform for CvM (rank based, so any continuous
    law gives the same answer) and standard normal for Student-T.
    """

    def __init__(self, num_draws: int = 20_000, seed: int = 0, precompute_only: bool = False):
        self.num_draws = num_draws
        self.seed = seed
        self.precompute_only = precompute_only
        self._cache: dict[tuple[StatisticKind, int, int], tuple[float, float]] = {}

    def _simulate(self, kind, n0, n1):
        rng = np.random.default_rng([self.seed, n0, n1, 0 if kind is StatisticKind.CVM else 1])
        draw = rng.random if kind is StatisticKind.CVM else rng.standard_normal
        raw = split_statistics(kind, draw((self.num_draws, n0 + n1)), [n0])[:, 0]
        return float(raw.mean()), float(raw.std(ddof=1))

    def prime(self, kind, pairs):
        kind = StatisticKind.parse(kind)
        for n0, n1 in pairs:
            key = (kind, int(n0), int(n1))
            if key not in self._cache:
                self._cache[key] = self._simulate(kind, int(n0), int(n1))

    def moments(self, kind, n0, n1):
        kind = StatisticKind.parse(kind)
        n0_arr, n1_arr = np.broadcast_arrays(np.asarray(n0, dtype=int), np.asarray(n1, dtype=int))
        means = np.empty(n0_arr.shape)
        sds = np.empty(n0_arr.shape)
        for idx, (a, b) in enumerate(zip(n0_arr.ravel(), n1_arr.ravel())):
            key = (kind, int(a), int(b))
            if key not in self._cache:
                if self.precompute_only:
                    raise MissingMomentsError(
                        f"no null moments for {kind.value} at sizes ({a}, {b}); run calibration first")
                self._cache[key] = self._simulate(kind, int(a), int(b))
            means.flat[idx], sds.flat[idx] = self._cache[key]
        return means, sds


DEFAULT_MOMENTS = ClosedFormMoments()


def normalize_statistic(kind: StatisticKind | str, raw, n0, n1,
                        moments: MomentSource = DEFAULT_MOMENTS):
    """Standardize raw statistics by their null mean and sd at sizes ``(n0, n1)``."""
    kind = StatisticKind.parse(kind)
    mean, sd = moments.moments(kind, n0, n1)
    result = (np.asarray(raw, dtype=float) - mean) / sd
    return float(result) if np.ndim(result) == 0 else result
