"""Sequential drift detection on streams of classifier confidences.

A change point model (CPM) watches the confidence stream for a
distributional change; a local density comparison then points at the
observations most likely to come from the new class.
"""

from .cpm import (
    AlphaMode,
    CalibrationSpec,
    CpmState,
    DetectionOutcome,
    ThresholdTable,
    calibrate_thresholds,
    cpm_step,
    run_cpm,
    scan_splits,
)
from .density import find_outliers, local_density_test, select_outliers
from .evaluation import (
    AggregateReport,
    DetectorSpec,
    LossParams,
    loss,
    naive_pairwise,
    naive_splits,
    peeking_simulation,
    run_experiment,
)
from .scenarios import ConfidenceSource, DriftScenario, synthesize_stream
from .statistics import StatisticKind, two_sample_statistic
from .stream import ConfidenceStream, Observation

__version__ = "0.1.0"

__all__ = [
    "AggregateReport", "AlphaMode", "CalibrationSpec", "ConfidenceSource", "ConfidenceStream", "CpmState",
    "DetectionOutcome", "DetectorSpec", "DriftScenario", "LossParams", "Observation", "StatisticKind",
    "ThresholdTable", "calibrate_thresholds", "cpm_step", "find_outliers", "local_density_test", "loss",
    "naive_pairwise", "naive_splits", "peeking_simulation", "run_cpm", "run_experiment", "scan_splits",
    "select_outliers", "synthesize_stream", "two_sample_statistic",
]
