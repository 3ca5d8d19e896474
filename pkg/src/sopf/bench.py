"""Centralized-vs-decomposed experiments and their reports."""

from __future__ import annotations

import csv
import io
import json
import os
import platform
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from .atc import AtcConfig, AtcError, config_to_dict, run_atc
from .conic import ClarabelBackend, solve
from .grid import CostCoefficients, duplicate_system, load_network
from .opf import build_centralized, extract_dispatch
from .scenarios import PRESETS, preset, scenarios_from_csv, validate_probabilities

__all__ = [
    "SCHEMA_VERSION",
    "METHODS",
    "UNSOLVABLE",
    "ConfigError",
    "ExperimentConfig",
    "MethodResult",
    "ExperimentReport",
    "obj_err",
    "speedup",
    "display_pct",
    "run_experiment",
    "emit_report",
    "validate_report",
    "load_scenarios",
]

SCHEMA_VERSION = "1.0"
METHODS = ("centralized", "atc-serial", "atc-parallel")
METHOD_ALIASES = {"central": "centralized", "serial": "atc-serial", "parallel": "atc-parallel"}
UNSOLVABLE = "unsolvable"
SUMMARY_HEADER = ["method", "total_cost", "stage1_cost", "stage2_cost", "iterations",
                  "time_s", "obj_err_pct", "speedup_pct"]


class ConfigError(ValueError):
    pass


def obj_err(cost_atc, cost_benchmark):
    """Percentage deviation of a decomposed cost from the benchmark cost."""
    if not cost_benchmark > 0:
        raise ValueError(f"benchmark cost must be positive, got {cost_benchmark!r}")
    return 100.0 * abs(cost_atc - cost_benchmark) / cost_benchmark


def speedup(t_serial, t_parallel):
    """Wall-time saving of the parallel run, in percent of the serial time."""
    if not (t_serial > 0 and t_parallel > 0):
        raise ValueError("run times must be positive")
    return 100.0 * (t_serial - t_parallel) / t_serial


def display_pct(value):
    return f"{value:.2f}"


def normalize_method(name):
    key = str(name).strip().lower()
    key = METHOD_ALIASES.get(key, key)
    if key not in METHODS:
        raise ConfigError(f"unknown method {name!r}; expected one of "
                          f"{sorted(METHODS + tuple(METHOD_ALIASES))}")
    return key


@dataclass(frozen=True)
class ExperimentConfig:
    network: str = "ieee33"
    dup: int = 1
    scenarios: str = "S5"
    horizon: int = 6
    costs: CostCoefficients = field(default_factory=CostCoefficients)
    atc: AtcConfig = field(default_factory=AtcConfig)
    methods: tuple = METHODS
    out: str = None
    seed: int = 0

    def __post_init__(self):
        methods = tuple(normalize_method(m) for m in self.methods)
        if not methods:
            raise ConfigError("at least one method is required")
        object.__setattr__(self, "methods", tuple(dict.fromkeys(methods)))
        if not isinstance(self.dup, int) or self.dup < 1:
            raise ConfigError(f"duplication factor must be a positive integer, got {self.dup!r}")
        if not isinstance(self.horizon, int) or self.horizon < 1:
            raise ConfigError(f"horizon must be a positive integer, got {self.horizon!r}")

    def to_dict(self):
        return {
            "network": str(self.network),
            "dup": self.dup,
            "scenarios": str(self.scenarios),
            "horizon": self.horizon,
            "costs": {"c_loss": self.costs.c_loss, "c_pv": self.costs.c_pv,
                      "c_dg": self.costs.c_dg},
            "atc": config_to_dict(self.atc),
            "methods": list(self.methods),
            "seed": self.seed,
        }


@dataclass
class MethodResult:
    method: str
    status: str
    total_cost: object = None
    stage1_cost: float = None
    stage2_cost: float = None
    iterations: int = None
    converged: bool = None
    time_s: float = None
    max_cone_gap: float = None
    message: str = ""
    trace: list = field(default_factory=list, repr=False)
    schedule: object = field(default=None, repr=False)

    @property
    def ok(self):
        return self.status == "ok"

    def to_dict(self):
        return {
            "method": self.method,
            "status": self.status,
            "total_cost": self.total_cost,
            "stage1_cost": self.stage1_cost,
            "stage2_cost": self.stage2_cost,
            "iterations": self.iterations,
            "converged": self.converged,
            "time_s": self.time_s,
            "max_cone_gap": self.max_cone_gap,
            "message": self.message,
        }


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    results: list
    obj_err_pct: dict
    speedup_pct: float
    environment: dict
    model: object = field(default=None, repr=False)

    def result(self, method):
        for r in self.results:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "environment": self.environment,
            "methods": [r.to_dict() for r in self.results],
            "obj_err_pct": self.obj_err_pct,
            "speedup_pct": self.speedup_pct,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, allow_nan=False) + "\n"

    def summary_rows(self):
        rows = []
        for r in self.results:
            rows.append([
                r.method,
                _fmt(r.total_cost),
                _fmt(r.stage1_cost),
                _fmt(r.stage2_cost),
                "" if r.iterations is None else r.iterations,
                _fmt(r.time_s),
                _fmt(self.obj_err_pct.get(r.method)),
                _fmt(self.speedup_pct if r.method == "atc-parallel" else None),
            ])
        return rows

    def summary_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        w.writerows(self.summary_rows())
        return buf.getvalue()


def _fmt(val):
    if val is None:
        return ""
    if isinstance(val, str):
        return val
    return repr(float(val))


def load_scenarios(source, horizon):
    """Preset name (case-insensitive) or path to a scenario CSV."""
    if str(source).upper() in PRESETS:
        out = preset(source, horizon)
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"scenario set {source!r} is neither a preset "
                              f"({', '.join(PRESETS)}) nor an existing file")
        out = scenarios_from_csv(path, horizon)
    validate_probabilities(out)
    return out


def environment_info(backend):
    return {
        "cores": os.cpu_count() or 1,
        "backend": backend.name,
        "backend_tol": backend.tol,
        "python": platform.python_version(),
        "platform": platform.system(),
    }


def _run_centralized(model, scen, costs, backend):
    t0 = time.perf_counter()
    try:
        program, vars_ = build_centralized(model, scen, costs)
        sol = solve(program, backend)
    except MemoryError as exc:
        return MethodResult("centralized", UNSOLVABLE, total_cost=UNSOLVABLE,
                            time_s=time.perf_counter() - t0, message=f"out of memory: {exc}")
    elapsed = time.perf_counter() - t0
    if not sol.optimal:
        return MethodResult("centralized", UNSOLVABLE, total_cost=UNSOLVABLE, time_s=elapsed,
                            message=f"{sol.status}: {sol.message}")
    sched = extract_dispatch(sol, vars_, model, costs)
    return MethodResult("centralized", "ok", sched.total_cost, sched.first_stage_cost,
                        sched.second_stage_cost, time_s=elapsed,
                        max_cone_gap=sched.max_cone_gap, schedule=sched)


def _run_atc(model, scen, costs, atc_cfg, mode, backend):
    name = f"atc-{mode}"
    cfg = replace(atc_cfg, mode=mode)
    t0 = time.perf_counter()
    try:
        res = run_atc(model, scen, costs, cfg, backend)
    except AtcError as exc:
        return MethodResult(name, "failed", time_s=time.perf_counter() - t0, message=str(exc))
    elapsed = time.perf_counter() - t0
    sched = res.schedule
    return MethodResult(name, "ok", res.total_cost, sched.first_stage_cost,
                        sched.second_stage_cost, res.iterations, res.converged, elapsed,
                        sched.max_cone_gap, "" if res.converged else "iteration limit reached",
                        trace=res.trace, schedule=sched)


def run_experiment(config, backend=None):
    """Run every requested method on the same inputs and collect a report.

    A centralized solve that fails is recorded as ``"unsolvable"`` and the
    decomposed runs still go ahead.  When ``config.out`` is set the report is
    written there.
    """
    if not isinstance(config, ExperimentConfig):
        raise ConfigError("run_experiment expects an ExperimentConfig")
    backend = backend or ClarabelBackend()
    model = duplicate_system(load_network(config.network), config.dup)
    scen = load_scenarios(config.scenarios, config.horizon)
    results = []
    for method in config.methods:
        if method == "centralized":
            results.append(_run_centralized(model, scen, config.costs, backend))
        else:
            results.append(_run_atc(model, scen, config.costs, config.atc,
                                    method.split("-")[1], backend))
    errs = {}
    bench = next((r for r in results if r.method == "centralized" and r.ok), None)
    if bench is not None:
        for r in results:
            if r.method != "centralized" and r.ok:
                errs[r.method] = obj_err(r.total_cost, bench.total_cost)
    by = {r.method: r for r in results}
    sp = None
    if all(m in by and by[m].ok for m in ("atc-serial", "atc-parallel")):
        sp = speedup(by["atc-serial"].time_s, by["atc-parallel"].time_s)
    report = ExperimentReport(config, results, errs, sp, environment_info(backend), model)
    if config.out is not None:
        emit_report(report, config.out)
    return report


def emit_report(report, out_dir):
    """Write ``report.json``, ``summary.csv`` and per-method trace/dispatch CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        path = out / name
        path.write_text(text)
        written.append(path)

    doc = report.to_dict()
    validate_report(doc)
    put("report.json", json.dumps(doc, indent=1, allow_nan=False) + "\n")
    put("summary.csv", report.summary_csv())
    for r in report.results:
        if r.trace:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["iter", "max_gap", "cost", "wall_ms"])
            for row in r.trace:
                w.writerow([row["iter"], repr(row["max_gap"]), repr(row["cost"]),
                            f"{row['wall_ms']:.3f}"])
            put(f"trace_{r.method}.csv", buf.getvalue())
        if r.schedule is not None and report.model is not None:
            put(f"dispatch_{r.method}.csv", r.schedule.to_csv(report.model))
    return written


def report_schema():
    text = resources.files("sopf.data").joinpath("report.schema.json").read_text()
    return json.loads(text)


def validate_report(doc):
    """Raise ``jsonschema.ValidationError`` if ``doc`` does not match the report schema."""
    import jsonschema

    jsonschema.validate(doc, report_schema())
    return True


def format_table(report):
    """Fixed-width text rendering of the summary, percentages to two decimals."""
    lines = [f"{'method':<14}{'total':>14}{'stage1':>12}{'stage2':>12}{'iters':>7}"
             f"{'time_s':>9}{'err%':>7}{'speedup%':>10}"]
    for r in report.results:
        tot = r.total_cost if isinstance(r.total_cost, str) or r.total_cost is None \
            else f"{r.total_cost:.4f}"
        err = report.obj_err_pct.get(r.method)
        sp = report.speedup_pct if r.method == "atc-parallel" else None
        lines.append(
            f"{r.method:<14}{tot or r.status:>14}"
            f"{'' if r.stage1_cost is None else f'{r.stage1_cost:.4f}':>12}"
            f"{'' if r.stage2_cost is None else f'{r.stage2_cost:.4f}':>12}"
            f"{'' if r.iterations is None else r.iterations:>7}"
            f"{'' if r.time_s is None else f'{r.time_s:.2f}':>9}"
            f"{'' if err is None else display_pct(err):>7}"
            f"{'' if sp is None else display_pct(sp):>10}")
    return "\n".join(lines)
