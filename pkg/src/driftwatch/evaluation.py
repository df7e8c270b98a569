"""Loss function, naive baselines, peeking simulation and experiment aggregation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .cpm import INF, AlphaMode, DetectionOutcome, ThresholdTable, run_cpm
from .density import (
    DEFAULT_ALPHA_STAR,
    DEFAULT_MAX_OUTLIERS,
    DEFAULT_N_GRID,
    DegenerateDensityError,
    drift_fraction,
    find_outliers,
)
from .scenarios import ConfidenceSource, DriftScenario, synthesize_stream
from .statistics import DEFAULT_MIN_SEGMENT
from .stream import ConfidenceStream, as_values, batch_of


@dataclass(frozen=True)
class LossParams:
    l0: float = -1000.0
    l1: float = -250.0

    def __post_init__(self):
        if not self.l0 < self.l1 < 0:
            raise ValueError(f"need l0 < l1 < 0, got l0={self.l0}, l1={self.l1}")


def loss(K: float, d: float, schedule: Sequence[float] | DriftScenario, batch_size: int = 20,
         params: LossParams = LossParams()) -> float:
    """Compounding detection loss.

    ``l0`` for a false alarm (``d <= K``), ``l1`` for a miss, and for a true
    detection ``l1 - l1 / prod_j (1 + p_j) ** ((b(d) - j) / (b(d) - b(K)))``
    over the batches ``j`` from the one after the change to the detection batch.
    """
    if math.isinf(K):
        raise ValueError("loss is undefined without a changepoint")
    if math.isinf(d):
        return params.l1
    if d <= K:
        return params.l0
    p = schedule.schedule if isinstance(schedule, DriftScenario) else tuple(schedule)
    change_batch = batch_of(int(K), batch_size) if K > 0 else 0
    det_batch = batch_of(int(d), batch_size)
    if det_batch > len(p):
        raise ValueError(f"detection batch {det_batch} is beyond the schedule ({len(p)} batches)")
    span = det_batch - change_batch
    log_prod = sum(math.log1p(p[j - 1]) * (det_batch - j) / span
                   for j in range(change_batch + 1, det_batch + 1))
    return params.l1 - params.l1 * math.exp(-log_prod)


def detection_delay(K: int, d: float, batch_size: int) -> float | None:
    """Batches between the change batch and the detection batch, less one; None unless a true detection."""
    if math.isinf(d) or d <= K:
        return None
    return batch_of(int(d), batch_size) - batch_of(K, batch_size) - 1


# ------------------------------------------------------------ naive baselines

def _pooled_t_pvalues(n0, s0, q0, n1, s1, q1) -> np.ndarray:
    """Two-sided pooled-variance t-test p-values from counts, sums and sums of squares."""
    n0, s0, q0, n1, s1, q1 = np.broadcast_arrays(*(np.asarray(a, float) for a in (n0, s0, q0, n1, s1, q1)))
    m0, m1 = s0 / n0, s1 / n1
    ss = (q0 - n0 * m0**2) + (q1 - n1 * m1**2)
    dof = n0 + n1 - 2
    var = ss / dof
    scale = np.maximum((q0 + q1) / (n0 + n1), 1e-300)
    ok = var > 1e-20 * scale
    tstat = np.zeros_like(var)
    tstat[ok] = (m0 - m1)[ok] / np.sqrt(var[ok] * (1 / n0[ok] + 1 / n1[ok]))
    return np.where(ok, 2 * stats.t.sf(np.abs(tstat), dof), 1.0)


def _batch_sums(z: Sequence[float], batch_size: int):
    z = as_values(z)
    n_batches = len(z) // batch_size
    if n_batches < 2:
        raise ValueError("need at least two complete batches")
    blocks = z[: n_batches * batch_size].reshape(n_batches, batch_size)
    blocks = blocks - blocks[0].mean()
    return n_batches, blocks.sum(axis=1), (blocks**2).sum(axis=1)


def naive_pairwise(z: Sequence[float], batch_size: int = 20, alpha: float = 0.05) -> float:
    """Batch-1 vs batch-j t-tests; returns ``j* - 1`` for the first significant ``j``, else inf."""
    n_batches, sums, squares = _batch_sums(z, batch_size)
    p = _pooled_t_pvalues(batch_size, sums[0], squares[0], batch_size, sums[1:], squares[1:])
    hits = np.flatnonzero(p <= alpha)
    return INF if hits.size == 0 else int(hits[0] + 2) - 1


def naive_splits(z: Sequence[float], batch_size: int = 20, alpha: float = 0.05) -> float:
    """Prefix-vs-suffix t-tests at every batch boundary; first batch whose best split is significant."""
    n_batches, sums, squares = _batch_sums(z, batch_size)
    cs, cq = np.cumsum(sums), np.cumsum(squares)
    for j in range(2, n_batches + 1):
        k = np.arange(1, j)
        s0, q0 = cs[k - 1], cq[k - 1]
        p = _pooled_t_pvalues(k * batch_size, s0, q0, (j - k) * batch_size,
                              cs[j - 1] - s0, cq[j - 1] - q0)
        if p.min() <= alpha:
            return j - 1
    return INF


# ------------------------------------------------------------------- peeking

def peeking_simulation(alpha: float, n: int = 100, start: int = 20, sims: int = 10_000,
                       seed: int = 0) -> dict[str, float]:
    """False alarms from re-testing a growing N(0, 1) sample with a two-sided z-test.

    Tests ``H0: mu = 0`` on ``x_1..x_t`` for each ``t = start..n`` and counts
    rejections ``V``; returns ``Pr(V >= 1)`` and ``E(V)``.
    """
    if not 1 <= start < n:
        raise ValueError("need 1 <= start < n")
    if sims < 1:
        raise ValueError("sims must be positive")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((sims, n))
    t = np.arange(1, n + 1)
    zstat = np.cumsum(x, axis=1) / np.sqrt(t)
    p = 2 * stats.norm.sf(np.abs(zstat[:, start - 1:]))
    v = (p < alpha).sum(axis=1)
    return {"alpha": alpha, "pr_v_ge_1": float((v >= 1).mean()), "e_v": float(v.mean())}


# ------------------------------------------------------------------ detectors

CPM_KINDS = ("cvm", "student_t")
NAIVE_KINDS = ("naive_pairwise", "naive_splits")


@dataclass(frozen=True)
class DetectorSpec:
    id: str
    kind: str
    alpha: float = 0.05
    alpha_mode: str = AlphaMode.HORIZON_TOTAL.value
    t0: int = 25
    evaluation_stride: int | None = None
    candidate_stride: int | None = None
    min_segment: int = DEFAULT_MIN_SEGMENT
    outlier_gated: bool = False
    alpha_star: float = DEFAULT_ALPHA_STAR
    max_outliers: int = DEFAULT_MAX_OUTLIERS
    n_grid: int = DEFAULT_N_GRID

    def __post_init__(self):
        if self.kind not in CPM_KINDS + NAIVE_KINDS:
            raise ValueError(f"unknown detector kind {self.kind!r}")
        if self.outlier_gated and not self.is_cpm:
            raise ValueError("only CPM detectors can be outlier-gated")
        AlphaMode(self.alpha_mode)

    @property
    def is_cpm(self) -> bool:
        return self.kind in CPM_KINDS

    def strides(self, batch_size: int) -> tuple[int, int]:
        return (self.evaluation_stride or batch_size, self.candidate_stride or batch_size)


def outlier_gate(detector: DetectorSpec):
    """Veto a CPM detection until the local density test yields at least one outlier."""
    def gate(values: np.ndarray, tau: int, t: int) -> bool:
        try:
            report = find_outliers(values, tau, t, detector.n_grid, detector.alpha_star,
                                   detector.max_outliers)
        except DegenerateDensityError:
            return False
        return len(report.selection) > 0
    return gate


@dataclass(frozen=True)
class RunRecord:
    scenario: str
    detector: str
    seed: tuple[int, ...]
    outcome: DetectionOutcome
    loss: float
    delay: float | None = None
    theta_all: float | None = None
    theta_gated: float | None = None
    theta_outliers: float | None = None
    outlier_count: int = 0


def detect(detector: DetectorSpec, z: Sequence[float], batch_size: int,
           table: ThresholdTable | None = None) -> DetectionOutcome:
    z = as_values(z)
    if detector.kind == "naive_pairwise":
        b_hat = naive_pairwise(z, batch_size, detector.alpha)
    elif detector.kind == "naive_splits":
        b_hat = naive_splits(z, batch_size, detector.alpha)
    else:
        if table is None:
            raise MissingThresholdTable(detector)
        gate = outlier_gate(detector) if detector.outlier_gated else None
        return run_cpm(z, table, gate=gate, confidence=False)
    if math.isinf(b_hat):
        return DetectionOutcome()
    return DetectionOutcome(d=(b_hat + 1) * batch_size, k_hat=b_hat * batch_size)


class MissingThresholdTable(LookupError):
    def __init__(self, detector: DetectorSpec):
        super().__init__(f"detector {detector.id!r} needs a calibrated threshold table; "
                         "run `driftwatch calibrate` first")
        self.detector = detector


def score_run(detector: DetectorSpec, stream: ConfidenceStream, outcome: DetectionOutcome,
              scenario: DriftScenario, seed: tuple[int, ...], params: LossParams) -> RunRecord:
    K = stream.changepoint
    value = loss(K, outcome.d, scenario, stream.batch_size, params)
    delay = detection_delay(K, outcome.d, stream.batch_size)
    extra = {}
    if delay is not None:
        d, k_hat = int(outcome.d), int(outcome.k_hat)
        window = range(k_hat + 1, d + 1)
        extra["theta_gated" if detector.outlier_gated else "theta_all"] = drift_fraction(window, stream)
        if detector.is_cpm:
            try:
                selection = find_outliers(stream.values, k_hat, d, detector.n_grid, detector.alpha_star,
                                          detector.max_outliers).selection
            except DegenerateDensityError:
                selection = ()
            if len(selection):
                extra["theta_outliers"] = drift_fraction(selection.theta_indices, stream)
                extra["outlier_count"] = len(selection)
    return RunRecord(scenario.name, detector.id, tuple(seed), outcome, value, delay, **extra)


def repetition_seed(master_seed: int, repetition: int, stream_id: int = 0) -> tuple[int, int, int]:
    """Counter-based seed; the same repetition gets the same stream across detectors and scenarios."""
    return (int(master_seed), int(stream_id), int(repetition))


def run_repetition(detector: DetectorSpec, scenario: DriftScenario, source: ConfidenceSource,
                   batch_size: int, seed: tuple[int, ...], table: ThresholdTable | None = None,
                   params: LossParams = LossParams()) -> RunRecord:
    stream = synthesize_stream(scenario, source, batch_size, seed)
    outcome = detect(detector, stream.values, batch_size, table)
    return score_run(detector, stream, outcome, scenario, seed, params)


@dataclass
class AggregateReport:
    scenario: str
    detector: str
    R: int
    false_alarm_prob: float
    missed_prob: float
    delays: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    theta: dict[str, list[float]] = field(default_factory=dict)
    records: list[RunRecord] = field(default_factory=list, repr=False)

    @property
    def mean_delay(self) -> float:
        return float(np.mean(self.delays)) if self.delays else math.nan

    def as_dict(self) -> dict:
        return {"scenario": self.scenario, "detector": self.detector, "R": self.R,
                "false_alarm_prob": self.false_alarm_prob, "missed_prob": self.missed_prob,
                "delays": self.delays, "losses": self.losses, "theta": self.theta}

    def to_json(self) -> str:
        return json.dumps(self.as_dict())


def aggregate(records: Sequence[RunRecord]) -> AggregateReport:
    """Merge repetition records; the result does not depend on their order."""
    if not records:
        raise ValueError("nothing to aggregate")
    records = sorted(records, key=lambda r: r.seed)
    scenario, detector = records[0].scenario, records[0].detector
    if any(r.scenario != scenario or r.detector != detector for r in records):
        raise ValueError("records mix scenarios or detectors")
    R = len(records)
    # detected without a delay means d <= K
    false_alarms = sum(1 for r in records if r.outcome.detected and r.delay is None)
    return AggregateReport(
        scenario=scenario, detector=detector, R=R,
        false_alarm_prob=false_alarms / R,
        missed_prob=sum(1 for r in records if not r.outcome.detected) / R,
        delays=[r.delay for r in records if r.delay is not None],
        losses=[r.loss for r in records],
        theta={"all": [r.theta_all for r in records if r.theta_all is not None],
               "gated": [r.theta_gated for r in records if r.theta_gated is not None],
               "outliers": [r.theta_outliers for r in records if r.theta_outliers is not None]},
        records=list(records),
    )


def run_experiment(detector: DetectorSpec, scenario: DriftScenario, source: ConfidenceSource,
                   repetitions: int, master_seed: int = 0, batch_size: int = 20,
                   table: ThresholdTable | None = None, params: LossParams = LossParams()) -> AggregateReport:
    if detector.is_cpm and table is None:
        raise MissingThresholdTable(detector)
    records = [run_repetition(detector, scenario, source, batch_size,
                              repetition_seed(master_seed, r), table, params)
               for r in range(repetitions)]
    return aggregate(records)
