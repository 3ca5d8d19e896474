"""Command line entry point: ``sopf run``, ``sopf validate`` and ``sopf oracle``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .atc import AtcConfig, default_workers
from .bench import ConfigError, ExperimentConfig, format_table, run_experiment
from .conic import solve
from .grid import CostCoefficients, NetworkError, check_schema, load_network, validate
from .opf import build_centralized
from .oracle import OracleError, oracle_cost, small_instance, small_scenarios
from .scenarios import ScenarioError


def _build_parser():
    parser = argparse.ArgumentParser(prog="sopf", description="Two-stage stochastic OPF "
                                     "with scenario decomposition.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run centralized and/or decomposed solves")
    run.add_argument("--network", default="ieee33", help="network JSON path or 'ieee33'")
    run.add_argument("--dup", type=int, default=1, help="number of disconnected copies")
    run.add_argument("--scenarios", default="s5", help="det, s5, s10, s20 or a CSV file")
    run.add_argument("--horizon", type=int, default=6)
    run.add_argument("--methods", default="central,serial,parallel",
                     help="comma-separated subset of central,serial,parallel")
    run.add_argument("--config", help="JSON or TOML file with ATC options")
    run.add_argument("--alpha", type=float)
    run.add_argument("--beta", type=float)
    run.add_argument("--lambda", dest="lam", type=float)
    run.add_argument("--eps", type=float)
    run.add_argument("--max-iters", type=int)
    run.add_argument("--workers", type=int)
    run.add_argument("--c-loss", type=float, default=CostCoefficients.c_loss)
    run.add_argument("--c-pv", type=float, default=CostCoefficients.c_pv)
    run.add_argument("--c-dg", type=float, default=CostCoefficients.c_dg)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", help="directory for report.json, summary.csv and traces")

    val = sub.add_parser("validate", help="check a network file")
    val.add_argument("network")

    orc = sub.add_parser("oracle", help="compare the conic model with brute force on a "
                         "two- or three-bus feeder")
    orc.add_argument("--buses", type=int, choices=(2, 3), default=2)
    orc.add_argument("--step", type=float, default=1e-3)
    return parser


def _atc_config(args):
    cfg = AtcConfig.from_file(args.config) if args.config else AtcConfig()
    overrides = {"alpha0": args.alpha, "beta0": args.beta, "lam": args.lam,
                 "epsilon": args.eps, "max_iters": args.max_iters, "workers": args.workers}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if "workers" not in overrides and not args.config:
        overrides["workers"] = default_workers()
    return replace(cfg, **overrides)


def cmd_run(args):
    config = ExperimentConfig(
        network=args.network,
        dup=args.dup,
        scenarios=args.scenarios,
        horizon=args.horizon,
        costs=CostCoefficients(args.c_loss, args.c_pv, args.c_dg),
        atc=_atc_config(args),
        methods=tuple(m for m in args.methods.split(",") if m.strip()),
        out=args.out,
        seed=args.seed,
    )
    report = run_experiment(config)
    print(format_table(report))
    for r in report.results:
        if r.message:
            print(f"{r.method}: {r.message}")
    if args.out:
        print(f"report written to {Path(args.out) / 'report.json'}")
    return 0


def cmd_validate(args):
    path = Path(args.network)
    if str(args.network).lower() != "ieee33":
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        problems = check_schema(doc)
        if problems:
            for p in problems:
                print(f"schema: {p}")
            return 1
    model = load_network(args.network)
    diags = validate(model)
    for d in diags:
        print(d)
    print(f"{model.name}: {len(model.buses)} buses, {len(model.lines)} lines, "
          f"{len(model.dgs)} DGs, {len(model.pvs)} PVs, {len(model.islands)} island(s)")
    return 0 if not diags else 1


def cmd_oracle(args):
    model = small_instance(args.buses)
    scen = small_scenarios()
    costs = CostCoefficients()
    brute, res = oracle_cost(model, scen, costs, args.step)
    sol = solve(build_centralized(model, scen, costs)[0])
    rel = abs(sol.objective - brute) / abs(brute)
    print(f"brute force : {brute:.10f} ({res.n_feasible}/{res.n_points} feasible points)")
    print(f"conic model : {sol.objective:.10f}")
    print(f"relative gap: {rel:.3e}")
    for key, val in sorted(res.setpoints.items(), key=str):
        print(f"  {key[0]}@{key[1]} = {val:.6f}")
    return 0 if rel <= 1e-3 else 1


def main(argv=None):
    args = _build_parser().parse_args(argv)
    handlers = {"run": cmd_run, "validate": cmd_validate, "oracle": cmd_oracle}
    try:
        return handlers[args.command](args)
    except (NetworkError, ScenarioError, ConfigError, OracleError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
