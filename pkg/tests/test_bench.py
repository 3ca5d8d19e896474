import csv
import json

import jsonschema
import pytest

from sopf.atc import AtcConfig
from sopf.bench import (UNSOLVABLE, ConfigError, ExperimentConfig, display_pct, emit_report,
                        obj_err, run_experiment, speedup, validate_report)
from sopf.conic import ClarabelBackend


def test_obj_err_examples():
    assert display_pct(obj_err(513.61, 513.57)) == "0.01"
    assert obj_err(513.61, 513.57) == pytest.approx(0.0078, abs=5e-5)
    assert obj_err(472.17, 472.04) == pytest.approx(0.0275, abs=5e-5)
    assert display_pct(obj_err(472.17, 472.04)) == "0.03"
    assert obj_err(10.0, 10.0) == 0.0
    with pytest.raises(ValueError):
        obj_err(1.0, 0.0)


def test_speedup_examples():
    assert display_pct(speedup(405.24, 156.84)) == "61.30"
    assert display_pct(speedup(850.86, 277.19)) == "67.42"
    assert speedup(3.0, 3.0) == 0.0
    with pytest.raises(ValueError):
        speedup(0.0, 1.0)


def test_config_errors():
    with pytest.raises(ConfigError):
        ExperimentConfig(methods=())
    with pytest.raises(ConfigError):
        ExperimentConfig(methods=("central", "magic"))
    with pytest.raises(ConfigError):
        ExperimentConfig(dup=0)
    assert ExperimentConfig(methods=("central", "serial")).methods == ("centralized",
                                                                      "atc-serial")


def small_config(tmp_path, **kw):
    base = dict(scenarios="DET", horizon=1, atc=AtcConfig(max_iters=200, workers=1),
                methods=("central", "serial", "parallel"), out=str(tmp_path / "out"))
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def det_report(tmp_path_factory):
    return run_experiment(small_config(tmp_path_factory.mktemp("det")))


def test_report_files(det_report):
    out = det_report.config.out
    import pathlib

    files = sorted(p.name for p in pathlib.Path(out).iterdir())
    assert "report.json" in files and "summary.csv" in files
    assert "trace_atc-serial.csv" in files and "trace_atc-parallel.csv" in files
    rows = list(csv.reader(open(pathlib.Path(out) / "summary.csv")))
    assert rows[0] == ["method", "total_cost", "stage1_cost", "stage2_cost", "iterations",
                       "time_s", "obj_err_pct", "speedup_pct"]
    assert len(rows) == 4
    trace = (pathlib.Path(out) / "trace_atc-serial.csv").read_text().splitlines()
    assert trace[0] == "iter,max_gap,cost,wall_ms"


def test_report_metrics(det_report):
    assert set(det_report.obj_err_pct) == {"atc-serial", "atc-parallel"}
    assert det_report.obj_err_pct["atc-serial"] <= 0.01
    assert det_report.speedup_pct is not None
    cen = det_report.result("centralized")
    assert cen.total_cost == pytest.approx(cen.stage1_cost + cen.stage2_cost, rel=1e-12)
    for r in det_report.results:
        assert r.total_cost == pytest.approx(r.schedule.first_stage_cost
                                             + r.schedule.second_stage_cost, rel=1e-6)


def test_report_schema_round_trip(det_report):
    doc = json.loads(det_report.to_json())
    assert doc["schema_version"] == "1.0"
    assert validate_report(doc)
    doc["methods"][0]["status"] = "weird"
    with pytest.raises(jsonschema.ValidationError):
        validate_report(doc)


def _strip_times(doc):
    for m in doc["methods"]:
        m["time_s"] = None
    doc["speedup_pct"] = None
    return doc


def test_rerun_is_deterministic(tmp_path, det_report):
    import pathlib

    run_experiment(small_config(tmp_path))
    first = pathlib.Path(det_report.config.out) / "report.json"
    second = tmp_path / "out" / "report.json"
    a = _strip_times(json.loads(first.read_text()))
    b = _strip_times(json.loads(second.read_text()))
    assert json.dumps(a, indent=1) == json.dumps(b, indent=1)


def test_unsolvable_centralized_is_recorded(tmp_path):
    class Refusing(ClarabelBackend):
        calls = 0

        def solve_standard(self, form):
            Refusing.calls += 1
            if Refusing.calls == 1:
                raise MemoryError("too big")
            return super().solve_standard(form)

    cfg = small_config(tmp_path, methods=("central", "serial"))
    report = run_experiment(cfg, backend=Refusing())
    cen = report.result("centralized")
    assert cen.status == UNSOLVABLE and cen.total_cost == UNSOLVABLE
    assert report.result("atc-serial").ok
    assert report.obj_err_pct == {}
    doc = json.loads((tmp_path / "out" / "report.json").read_text())
    assert doc["methods"][0]["total_cost"] == "unsolvable"
    assert "unsolvable" in (tmp_path / "out" / "summary.csv").read_text()


def test_emit_report_rows_follow_methods(tmp_path, det_report):
    written = emit_report(det_report, tmp_path / "copy")
    assert any(p.name == "dispatch_centralized.csv" for p in written)
    lines = (tmp_path / "copy" / "summary.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in lines[1:]] == ["centralized", "atc-serial",
                                                      "atc-parallel"]
