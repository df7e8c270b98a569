"""Local kernel-density two-sample test and outlier selection.

Given the pre-change sample ``Z0`` and post-change sample ``Z1``, find the
parts of [0, 1] where the post-change density is significantly *higher*
than the pre-change density, then report the post-change observations that
fall there, most significant region first.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats

from .stream import ConfidenceStream

DEFAULT_N_GRID = 401
DEFAULT_ALPHA_STAR = 0.05
DEFAULT_MAX_OUTLIERS = 10
MIN_KDE_SAMPLE = 5
VARIANCE_FLOOR = 1e-12
# roughness R(K) = integral of K^2 for the standard Gaussian kernel
GAUSSIAN_ROUGHNESS = 1.0 / (2.0 * math.sqrt(math.pi))


class DegenerateDensityError(ValueError):
    pass


def silverman_bandwidth(sample: np.ndarray) -> float:
    """``0.9 * min(sd, IQR/1.34) * n**(-1/5)``, ignoring whichever spread is zero."""
    x = np.asarray(sample, dtype=float)
    if np.ptp(x) == 0:
        raise DegenerateDensityError("sample is constant; bandwidth undefined")
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    spreads = [s for s in (sd, (q75 - q25) / 1.34) if s > 0]
    if not spreads:
        raise DegenerateDensityError("sample is constant; bandwidth undefined")
    return 0.9 * min(spreads) * len(x) ** -0.2


@dataclass(frozen=True, eq=False)
class KdeModel:
    sample: np.ndarray
    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise DegenerateDensityError(f"bandwidth must be positive, got {self.bandwidth}")

    @property
    def n(self) -> int:
        return len(self.sample)

    def density(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        u = (x[:, None] - self.sample[None, :]) / self.bandwidth
        return np.exp(-0.5 * u**2).sum(axis=1) / (self.n * self.bandwidth * math.sqrt(2 * math.pi))


def kde_fit(sample: Sequence[float],
            bandwidth_rule: Callable[[np.ndarray], float] = silverman_bandwidth) -> KdeModel:
    x = np.asarray(sample, dtype=float)
    if x.ndim != 1 or len(x) < MIN_KDE_SAMPLE:
        raise DegenerateDensityError(f"need at least {MIN_KDE_SAMPLE} values for a density estimate, got {len(x)}")
    return KdeModel(sample=x, bandwidth=float(bandwidth_rule(x)))


def hochberg_adjust(p_values: Sequence[float]) -> np.ndarray:
    """Hochberg step-up adjusted p-values, in the input order."""
    p = np.asarray(p_values, dtype=float)
    n = len(p)
    if n == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    scaled = np.minimum(1.0, (n - np.arange(n)) * p[order])
    # running minimum from the largest p-value down
    adjusted_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(n)
    out[order] = adjusted_sorted
    return out


@dataclass(frozen=True, eq=False)
class LocalTestResult:
    grid: np.ndarray
    deltas: np.ndarray
    chi_sq: np.ndarray
    p_raw: np.ndarray
    p_adjusted: np.ndarray
    alpha_star: float

    @property
    def significant_higher(self) -> np.ndarray:
        """Grid mask where the post-change density is significantly above the pre-change one."""
        return (self.p_adjusted < self.alpha_star) & (self.deltas > 0)


def local_density_test(model0: KdeModel, model1: KdeModel, n_grid: int = DEFAULT_N_GRID,
                       alpha_star: float = DEFAULT_ALPHA_STAR) -> LocalTestResult:
    """Pointwise chi-squared tests of ``f1 - f0`` on an even grid over [0, 1].

    The variance of each difference uses the asymptotic KDE variance
    ``f(x) R(K) / (n h)`` of each estimate, summed over the two samples.
    """
    if n_grid < 51:
        raise ValueError(f"n_grid must be at least 51, got {n_grid}")
    grid = np.linspace(0.0, 1.0, n_grid)
    f0 = model0.density(grid)
    f1 = model1.density(grid)
    deltas = f1 - f0
    var = (f0 * GAUSSIAN_ROUGHNESS / (model0.n * model0.bandwidth)
           + f1 * GAUSSIAN_ROUGHNESS / (model1.n * model1.bandwidth))
    usable = var >= VARIANCE_FLOOR
    chi_sq = np.zeros(n_grid)
    chi_sq[usable] = deltas[usable] ** 2 / var[usable]
    p_raw = np.where(usable, stats.chi2.sf(chi_sq, df=1), 1.0)
    return LocalTestResult(grid=grid, deltas=deltas, chi_sq=chi_sq, p_raw=p_raw,
                           p_adjusted=hochberg_adjust(p_raw), alpha_star=alpha_star)


@dataclass(frozen=True)
class Region:
    lo: float
    hi: float
    p_value: float
    n_points: int

    def contains(self, z: float) -> bool:
        return self.lo <= z <= self.hi

    def as_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "p_value": self.p_value, "n_points": self.n_points}


@dataclass(frozen=True)
class SignificantRegionSet:
    regions: tuple[Region, ...] = ()

    def __len__(self) -> int:
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    def contains(self, z: float) -> bool:
        return any(r.contains(z) for r in self.regions)

    def to_json(self) -> str:
        return json.dumps([r.as_dict() for r in self.regions])


def extract_regions(result: LocalTestResult) -> SignificantRegionSet:
    """Maximal runs of grid points where ``f1`` is significantly above ``f0``."""
    mask = result.significant_higher.astype(np.int8)
    edges = np.diff(np.concatenate([[0], mask, [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    regions = tuple(
        Region(lo=float(result.grid[a]), hi=float(result.grid[b - 1]),
               p_value=float(result.p_adjusted[a:b].min()), n_points=int(b - a))
        for a, b in zip(starts, stops))
    return SignificantRegionSet(regions)


@dataclass(frozen=True)
class OutlierSelection:
    theta_indices: tuple[int, ...] = ()
    max_outliers: int = DEFAULT_MAX_OUTLIERS

    def __len__(self) -> int:
        return len(self.theta_indices)


def select_outliers(regions: SignificantRegionSet, post_change: Iterable[tuple[int, float]],
                    max_outliers: int = DEFAULT_MAX_OUTLIERS) -> OutlierSelection:
    """Up to ``max_outliers`` post-change indices lying in the regions.

    Regions are visited from the smallest p-value up (ties by position);
    within a region, indices are taken in time order.
    """
    if max_outliers < 1:
        raise ValueError("max_outliers must be positive")
    points = sorted((int(t), float(z)) for t, z in post_change)
    chosen: list[int] = []
    for region in sorted(regions, key=lambda r: (r.p_value, r.lo)):
        for t, z in points:
            if len(chosen) == max_outliers:
                return OutlierSelection(tuple(chosen), max_outliers)
            if region.contains(z):
                chosen.append(t)
    return OutlierSelection(tuple(chosen), max_outliers)


@dataclass(frozen=True)
class OutlierReport:
    result: LocalTestResult
    regions: SignificantRegionSet
    selection: OutlierSelection


def find_outliers(z: Sequence[float], k_hat: int, d: int, n_grid: int = DEFAULT_N_GRID,
                  alpha_star: float = DEFAULT_ALPHA_STAR,
                  max_outliers: int = DEFAULT_MAX_OUTLIERS) -> OutlierReport:
    """Run the local test on ``z[:k_hat]`` vs ``z[k_hat:d]`` (1-based ``t`` in the selection)."""
    z = np.asarray(z, dtype=float)
    model0 = kde_fit(z[:k_hat])
    model1 = kde_fit(z[k_hat:d])
    result = local_density_test(model0, model1, n_grid, alpha_star)
    regions = extract_regions(result)
    post = [(t, z[t - 1]) for t in range(k_hat + 1, d + 1)]
    return OutlierReport(result, regions, select_outliers(regions, post, max_outliers))


def outlier_report_json(selection: OutlierSelection, stream: ConfidenceStream) -> str:
    """User-facing outlier list; ground-truth drift flags are deliberately left out."""
    rows = []
    for t in selection.theta_indices:
        obs = stream.observations[t - 1]
        rows.append({"t": obs.t, "z": obs.z, "label": obs.label})
    return json.dumps(rows)


def drift_fraction(indices: Iterable[int], stream: ConfidenceStream) -> float:
    """Share of the given 1-based indices whose observation is from the drift class."""
    idx = list(indices)
    if not idx:
        raise ValueError("drift fraction of an empty index set is undefined")
    flags = stream.drift_flags
    return float(np.mean([flags[t - 1] for t in idx]))
