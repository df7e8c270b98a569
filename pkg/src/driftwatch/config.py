"""Run configuration: a single JSON file plus command-line overrides."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .cpm import AlphaMode, CalibrationSpec
from .evaluation import DetectorSpec, LossParams
from .scenarios import (
    DEFAULT_CHANGE_BATCH,
    DEFAULT_TOTAL_BATCHES,
    SCENARIO_NAMES,
    ConfidenceSource,
    DriftScenario,
    ScenarioError,
    read_pool_csv,
)

CACHE_ENV = "DRIFTWATCH_CACHE"
DEFAULT_CACHE_DIR = ".driftwatch-cache"

DEFAULT_DETECTORS = (
    {"id": "Student-T", "kind": "student_t"},
    {"id": "CvM", "kind": "cvm"},
    {"id": "Student-T_outliers", "kind": "student_t", "outlier_gated": True},
    {"id": "CvM_outliers", "kind": "cvm", "outlier_gated": True},
    {"id": "naiveT_pairwise", "kind": "naive_pairwise"},
    {"id": "naiveT_splits", "kind": "naive_splits"},
)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    detectors: list[DetectorSpec]
    scenarios: list[DriftScenario]
    source: ConfidenceSource
    batch_size: int = 20
    repetitions: int = 50
    seed: int = 0
    output_dir: Path = Path("driftwatch-out")
    threshold_cache: Path | None = None
    calibration_streams: int = 2000
    calibration_seed: int = 0
    loss: LossParams = field(default_factory=LossParams)
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def horizon(self) -> int:
        return max(s.total_batches for s in self.scenarios) * self.batch_size

    @property
    def cache_dir(self) -> Path:
        env = os.environ.get(CACHE_ENV)
        if env:
            return Path(env)
        return self.threshold_cache or Path(DEFAULT_CACHE_DIR)

    def calibration_spec(self, detector: DetectorSpec) -> CalibrationSpec:
        eval_stride, cand_stride = detector.strides(self.batch_size)
        return CalibrationSpec(kind=detector.kind, t0=detector.t0, horizon=self.horizon,
                               evaluation_stride=eval_stride, candidate_stride=cand_stride,
                               num_streams=self.calibration_streams, seed=self.calibration_seed,
                               min_segment=detector.min_segment)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:12]


def _source_from(spec: dict | str | None, base_dir: Path) -> ConfidenceSource:
    if spec is None:
        return ConfidenceSource()
    if isinstance(spec, str):
        return ConfidenceSource.preset(spec)
    if "preset" in spec:
        return ConfidenceSource.preset(spec["preset"])
    kind = spec.get("kind", "beta_synthetic")
    if kind == "pool_csv":
        return read_pool_csv(base_dir / spec["path"])
    return ConfidenceSource(kind=kind, base_params=tuple(spec.get("base", (8.0, 2.0))),
                            drift_params=tuple(spec.get("drift", (2.0, 2.0))))


def _scenario_from(entry, change_batch, total_batches, base_dir: Path) -> DriftScenario:
    if isinstance(entry, str):
        return DriftScenario.named(entry, change_batch, total_batches)
    name = entry.get("name", "custom")
    if "file" in entry:
        return DriftScenario.from_json(base_dir / entry["file"], name=name)
    if "schedule" in entry:
        return DriftScenario(name, tuple(entry["schedule"]), int(entry.get("change_batch", change_batch)))
    return DriftScenario.named(name, change_batch, total_batches)


def build_config(raw: dict, base_dir: str | Path = ".") -> RunConfig:
    """Validate a parsed config dict; every problem surfaces as ``ConfigError``."""
    base_dir = Path(base_dir)
    try:
        change_batch = int(raw.get("change_batch", DEFAULT_CHANGE_BATCH))
        total_batches = int(raw.get("total_batches", DEFAULT_TOTAL_BATCHES))
        scenarios = [_scenario_from(e, change_batch, total_batches, base_dir)
                     for e in raw.get("scenarios", SCENARIO_NAMES)]
        detectors = [DetectorSpec(**d) for d in raw.get("detectors", DEFAULT_DETECTORS)]
        calibration = raw.get("calibration", {})
        loss = raw.get("loss", {})
        if "seed" not in raw:
            raise ConfigError("config must set a master 'seed'")
        cfg = RunConfig(
            detectors=detectors,
            scenarios=scenarios,
            source=_source_from(raw.get("source"), base_dir),
            batch_size=int(raw.get("batch_size", 20)),
            repetitions=int(raw.get("repetitions", 50)),
            seed=int(raw["seed"]),
            output_dir=Path(raw.get("output_dir", "driftwatch-out")),
            threshold_cache=Path(raw["threshold_cache"]) if raw.get("threshold_cache") else None,
            calibration_streams=int(calibration.get("num_streams", 2000)),
            calibration_seed=int(calibration.get("seed", 0)),
            loss=LossParams(float(loss.get("l0", -1000.0)), float(loss.get("l1", -250.0))),
            raw=raw,
        )
    except ConfigError:
        raise
    except (ScenarioError, ValueError, TypeError, KeyError, OSError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    ids = [d.id for d in cfg.detectors]
    if len(set(ids)) != len(ids):
        raise ConfigError("detector ids must be unique")
    if cfg.batch_size < 1 or cfg.repetitions < 1:
        raise ConfigError("batch_size and repetitions must be positive")
    for det in cfg.detectors:
        if det.is_cpm:
            try:
                AlphaMode(det.alpha_mode)
                cfg.calibration_spec(det)
            except ValueError as exc:
                raise ConfigError(f"detector {det.id!r}: {exc}") from exc
    return cfg


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    raw: dict = {}
    base_dir = Path(".")
    if path is not None:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        base_dir = path.parent
    raw = {**raw, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    return build_config(raw, base_dir)


def faithful(cfg: RunConfig) -> RunConfig:
    """Same config with every CPM detector scanning and testing at every observation."""
    cfg.detectors = [replace(d, evaluation_stride=1, candidate_stride=1) if d.is_cpm else d
                     for d in cfg.detectors]
    cfg.raw = {**cfg.raw, "faithful": True}
    return cfg
