import csv
import json

import numpy as np
import pytest

from driftwatch.cli import main
from driftwatch.config import CACHE_ENV, ConfigError, load_config
from driftwatch.cpm import ThresholdTable


def write_config(tmp_path, **extra):
    cfg = {
        "seed": 5, "batch_size": 10, "change_batch": 10, "total_batches": 20, "repetitions": 4,
        "scenarios": ["sudden_full", "sudden_quarter"],
        "detectors": [{"id": "CvM", "kind": "cvm"}, {"id": "naive", "kind": "naive_splits"}],
        "calibration": {"num_streams": 300, "seed": 1},
        "threshold_cache": str(tmp_path / "cache"), "output_dir": str(tmp_path / "out"),
    }
    cfg.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(autouse=True)
def no_cache_env(monkeypatch):
    monkeypatch.delenv(CACHE_ENV, raising=False)


class TestPeek:
    def test_empty_alpha_list(self, tmp_path, capsys):
        assert main(["peek", "--alphas", "", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "peek.csv").read_text() == "alpha,pr_v_ge_1,e_v\n"

    def test_bounds(self, tmp_path):
        assert main(["peek", "--alphas", "0.5", "--sims", "500", "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "peek.csv")
        assert len(rows) == 2
        assert 0 <= float(rows[1][1]) <= 1 and 0 <= float(rows[1][2]) <= 81
        assert (tmp_path / "peek.png").stat().st_size > 0


class TestLossCurve:
    def test_rows(self, tmp_path):
        assert main(["losscurve", "--scenario", "sudden_full", "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "losscurve_sudden_full.csv")[1:]
        assert len(rows) == 101
        values = {b: float(v) for _, b, v in rows}
        assert all(values[str(b)] == -1000 for b in range(1, 51))
        assert values["51"] == 0
        assert values["53"] == pytest.approx(-125, abs=1e-9)
        assert values["inf"] == -250
        assert (tmp_path / "losscurve_sudden_full.png").exists()

    def test_readable_parameterisation(self, tmp_path):
        assert main(["losscurve", "--readable", "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "losscurve_all.csv")[1:]
        assert len(rows) == 8 * 101
        assert {float(v) for _, b, v in rows if b == "1"} == {-350.0}

    def test_unknown_scenario(self, tmp_path):
        assert main(["losscurve", "--scenario", "bogus", "--out", str(tmp_path)]) == 2


class TestCalibrateAndRun:
    def test_run_needs_cache(self, tmp_path, capsys):
        assert main(["run", "--config", str(write_config(tmp_path))]) == 3
        assert "driftwatch calibrate" in capsys.readouterr().err

    def test_full_cycle(self, tmp_path):
        cfg = write_config(tmp_path, detectors=[
            {"id": "CvM", "kind": "cvm"}, {"id": "CvM01", "kind": "cvm", "alpha": 0.01},
            {"id": "naive", "kind": "naive_pairwise"}])
        assert main(["calibrate", "--config", str(cfg)]) == 0
        cache = sorted((tmp_path / "cache").iterdir())
        assert len(cache) == 2
        first = [p.read_bytes() for p in cache]
        assert main(["calibrate", "--config", str(cfg)]) == 0
        assert [p.read_bytes() for p in cache] == first
        t05, t01 = sorted((ThresholdTable.load(p) for p in cache), key=lambda t: -t.alpha)
        assert np.all(t01.values >= t05.values)

        assert main(["run", "--config", str(cfg)]) == 0
        assert main(["run", "--config", str(cfg)]) == 0
        runs = sorted((tmp_path / "out").glob("run-*"))
        assert len(runs) == 2
        report = json.loads((runs[0] / "report.json").read_text())
        assert len(report) == 2 * 3
        assert report == json.loads((runs[1] / "report.json").read_text())
        assert set(report[0]) == {"scenario", "detector", "R", "false_alarm_prob", "missed_prob", "delays",
                                  "losses", "theta"}
        for name in ("rates.csv", "delays.csv", "losses.csv", "theta.csv", "records.csv",
                     "false_alarm.png", "delay.png"):
            assert (runs[0] / name).exists()
        assert len(read_csv(runs[0] / "rates.csv")) == 7

    def test_jobs_do_not_change_results(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["calibrate", "--config", str(cfg), "--jobs", "2"]) == 0
        assert main(["run", "--config", str(cfg)]) == 0
        assert main(["run", "--config", str(cfg), "--jobs", "2"]) == 0
        a, b = sorted((tmp_path / "out").glob("run-*"))
        assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()

    def test_cache_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv(CACHE_ENV, str(tmp_path / "elsewhere"))
        assert main(["calibrate", "--config", str(write_config(tmp_path))]) == 0
        assert len(list((tmp_path / "elsewhere").iterdir())) == 1
        assert not (tmp_path / "cache").exists()

    def test_faithful_strides(self, tmp_path):
        cfg = write_config(tmp_path, total_batches=4, change_batch=2, scenarios=["sudden_full"])
        assert main(["calibrate", "--config", str(cfg), "--faithful"]) == 0
        table = ThresholdTable.load(next((tmp_path / "cache").iterdir()))
        assert table.evaluation_stride == table.candidate_stride == 1

    def test_t0_beyond_horizon(self, tmp_path):
        cfg = write_config(tmp_path, detectors=[{"id": "CvM", "kind": "cvm", "t0": 500}])
        assert main(["calibrate", "--config", str(cfg)]) == 2

    def test_exhausted_survivors(self, tmp_path):
        cfg = write_config(tmp_path, calibration={"num_streams": 20},
                           detectors=[{"id": "CvM", "kind": "cvm", "alpha": 0.5,
                                       "alpha_mode": "per_evaluation_hazard"}])
        assert main(["calibrate", "--config", str(cfg)]) == 4

    def test_seed_override(self, tmp_path):
        cfg = write_config(tmp_path)
        raw = json.loads(cfg.read_text())
        del raw["seed"]
        cfg.write_text(json.dumps(raw))
        assert main(["calibrate", "--config", str(cfg)]) == 2
        assert load_config(cfg, {"seed": 9}).seed == 9


class TestConfig:
    def test_unknown_scenario(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, scenarios=["nope"]))

    def test_duplicate_ids(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path, detectors=[{"id": "a", "kind": "cvm"}, {"id": "a", "kind": "cvm"}]))

    def test_custom_scenario_and_pool(self, tmp_path):
        (tmp_path / "sc.json").write_text(json.dumps({"change_batch": 2, "total_batches": 4,
                                                       "schedule": [0, 0, 1, 1]}))
        (tmp_path / "pool.csv").write_text("z,label,pool\n0.9,1,base\n0.8,1,base\n0.2,9,drift\n")
        cfg = load_config(write_config(tmp_path, scenarios=[{"name": "mine", "file": "sc.json"}],
                                       source={"kind": "pool_csv", "path": "pool.csv"}))
        assert cfg.scenarios[0].schedule == (0, 0, 1, 1)
        assert cfg.source.kind == "pool_csv"
        assert cfg.horizon == 40


class TestIngestCheck:
    def test_valid_and_invalid(self, tmp_path, capsys):
        good = tmp_path / "pool.csv"
        good.write_text("z,label,pool\n0.9,3,base\n0.4,7,drift\n")
        stream = tmp_path / "stream.csv"
        stream.write_text("t,z,is_drift,label\n1,0.5,0,\n2,0.7,1,x\n")
        assert main(["ingest-check", str(good), str(stream)]) == 0
        bad = tmp_path / "bad.csv"
        bad.write_text("z,label,pool\n2.0,3,base\n")
        assert main(["ingest-check", str(good), str(bad)]) == 2
        assert "outside" in capsys.readouterr().err
