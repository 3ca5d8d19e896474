"""Two-stage stochastic DistFlow OPF as conic programs.

The first stage dispatches DGs and PVs against the forecast; each error
scenario gets a full copy of the network with its own loads and PV
availability, plus up/down re-dispatch of the DGs around a scenario-local
copy of the first-stage setpoints.  The centralized model ties those copies
to the first-stage setpoints with equality rows.

Every line carries the relaxed branch-flow cone
``||(2 T_P, 2 T_Q, l - v_i)|| <= l + v_i``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .conic import EXACTNESS_TOL, ConicProgram, ProgramError
from .scenarios import FORECAST, realize

__all__ = [
    "V_REF_SQ",
    "FirstStageVars",
    "SecondStageVars",
    "CentralizedVars",
    "StageDispatch",
    "DispatchSchedule",
    "ConsistencyError",
    "build_first_stage",
    "build_second_stage",
    "build_centralized",
    "coupling_layout",
    "stage_cost",
    "extract_dispatch",
    "schedule_from_parts",
    "max_cone_gap",
]

V_REF_SQ = 1.0


class ConsistencyError(RuntimeError):
    """Recomputed costs disagree with the solver objective."""


@dataclass
class FirstStageVars:
    """Index arrays into a program, shaped (entity, t).

    Rows of ``p_dg``/``q_dg`` follow ``model.dgs``, PV rows follow
    ``model.pvs``, bus rows follow ``model.buses`` and line rows follow
    ``model.lines``.
    """

    stage: object
    hours: tuple
    p_dg: np.ndarray
    q_dg: np.ndarray
    p_pv: np.ndarray
    q_pv: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    tp: np.ndarray
    tq: np.ndarray
    l: np.ndarray
    v: np.ndarray
    soc_ids: np.ndarray
    pv_avail: np.ndarray
    r: np.ndarray
    weight: float = 1.0

    @property
    def coupling(self):
        """Indices of the coupled DG setpoints, flattened in coupling order."""
        return np.concatenate([self.p_dg.ravel(), self.q_dg.ravel()])


@dataclass
class SecondStageVars(FirstStageVars):
    p_copy: np.ndarray = None
    q_copy: np.ndarray = None
    p_up: np.ndarray = None
    p_dn: np.ndarray = None
    q_up: np.ndarray = None
    q_dn: np.ndarray = None

    @property
    def coupling(self):
        return np.concatenate([self.p_copy.ravel(), self.q_copy.ravel()])


@dataclass
class CentralizedVars:
    first: FirstStageVars
    second: list
    probabilities: np.ndarray


def coupling_layout(model, hours):
    """Labels ``(kind, dg_bus, hour)`` of the coupling vector, in order."""
    return [(kind, g.bus, t) for kind in ("P", "Q") for g in model.dgs for t in hours]


def _stage(program, model, tables, costs, stage, weight, second):
    hours = tables.hours
    T = len(hours)
    buses, lines = model.buses, model.lines
    dgs, pvs = model.dgs, model.pvs
    bus_pos = {b.id: k for k, b in enumerate(buses)}
    kids = model.children()
    parent = model.parent_line()

    def grid(n):
        return np.empty((n, T), dtype=int)

    p_inj, q_inj, v = grid(len(buses)), grid(len(buses)), grid(len(buses))
    tp, tq, l = grid(len(lines)), grid(len(lines)), grid(len(lines))
    p_dg, q_dg = grid(len(dgs)), grid(len(dgs))
    p_pv, q_pv = grid(len(pvs)), grid(len(pvs))
    soc_ids = grid(len(lines))
    ext = {k: grid(len(dgs)) for k in ("p_copy", "q_copy", "p_up", "p_dn", "q_up", "q_dn")}
    add = program.add_variable
    lin = {}
    const = 0.0

    for ti, t in enumerate(hours):
        for k, b in enumerate(buses):
            p_inj[k, ti] = add(("P", stage, b.id, t)).index
            q_inj[k, ti] = add(("Q", stage, b.id, t)).index
            v[k, ti] = add(("v", stage, b.id, t), b.v_min_sq, b.v_max_sq).index
        for k, ln in enumerate(lines):
            key = (ln.from_bus, ln.to_bus)
            tp[k, ti] = add(("T_P", stage, key, t), ln.tp_min, ln.tp_max).index
            tq[k, ti] = add(("T_Q", stage, key, t), ln.tq_min, ln.tq_max).index
            l[k, ti] = add(("l", stage, key, t), 0.0).index
            lin[l[k, ti]] = lin.get(l[k, ti], 0.0) + weight * costs.c_loss * ln.r
        for k, g in enumerate(dgs):
            p_dg[k, ti] = add(("P_DG", stage, g.bus, t), g.p_min, g.p_max).index
            q_dg[k, ti] = add(("Q_DG", stage, g.bus, t), g.q_min, g.q_max).index
            if second:
                for name in ("p_copy", "q_copy"):
                    ext[name][k, ti] = add((name, stage, g.bus, t)).index
                for name in ("p_up", "p_dn", "q_up", "q_dn"):
                    ext[name][k, ti] = add((name, stage, g.bus, t), 0.0).index
                    lin[ext[name][k, ti]] = weight * costs.c_dg
        for k, g in enumerate(pvs):
            avail = float(tables.pv_avail[k, ti])
            p_pv[k, ti] = add(("P_PV", stage, g.bus, t), 0.0, avail).index
            q_pv[k, ti] = add(("Q_PV", stage, g.bus, t)).index
            lin[p_pv[k, ti]] = -weight * costs.c_pv
            const += weight * costs.c_pv * avail

        # nodal balance: P_j + sum_in (T - r l) - sum_out T = 0
        for k, b in enumerate(buses):
            rp = {p_inj[k, ti]: 1.0}
            rq = {q_inj[k, ti]: 1.0}
            if b.id in parent:
                m = parent[b.id]
                rp[tp[m, ti]] = 1.0
                rp[l[m, ti]] = -lines[m].r
                rq[tq[m, ti]] = 1.0
                rq[l[m, ti]] = -lines[m].x
            for m in kids.get(b.id, ()):
                rp[tp[m, ti]] = rp.get(tp[m, ti], 0.0) - 1.0
                rq[tq[m, ti]] = rq.get(tq[m, ti], 0.0) - 1.0
            program.add_eq(rp, 0.0, tag="balance")
            program.add_eq(rq, 0.0, tag="balance")

        # injections: generator buses get DG/PV terms, every bus its load
        inj_p = {k: {p_inj[k, ti]: 1.0} for k in range(len(buses))}
        inj_q = {k: {q_inj[k, ti]: 1.0} for k in range(len(buses))}
        for k, g in enumerate(dgs):
            inj_p[bus_pos[g.bus]][p_dg[k, ti]] = -1.0
            inj_q[bus_pos[g.bus]][q_dg[k, ti]] = -1.0
        for k, g in enumerate(pvs):
            inj_p[bus_pos[g.bus]][p_pv[k, ti]] = -1.0
            inj_q[bus_pos[g.bus]][q_pv[k, ti]] = -1.0
        for k in range(len(buses)):
            program.add_eq(inj_p[k], -float(tables.load_p[k, ti]), tag="injection")
            program.add_eq(inj_q[k], -float(tables.load_q[k, ti]), tag="injection")

        # voltage drop and relaxed branch-flow cone
        for k, ln in enumerate(lines):
            i, j = bus_pos[ln.from_bus], bus_pos[ln.to_bus]
            z2 = ln.r ** 2 + ln.x ** 2
            program.add_eq({v[j, ti]: 1.0, v[i, ti]: -1.0, tp[k, ti]: 2 * ln.r,
                            tq[k, ti]: 2 * ln.x, l[k, ti]: -z2}, 0.0, tag="drop")
            soc_ids[k, ti] = program.add_soc(
                [{tp[k, ti]: 2.0}, {tq[k, ti]: 2.0}, {l[k, ti]: 1.0, v[i, ti]: -1.0}],
                None, {l[k, ti]: 1.0, v[i, ti]: 1.0}, tag="soc")

        for ref in model.reference_buses:
            program.add_eq({v[bus_pos[ref], ti]: 1.0}, V_REF_SQ, tag="reference")

        # |Q_PV| <= P_PV tan(phi)
        for k, g in enumerate(pvs):
            program.add_ineq({q_pv[k, ti]: 1.0, p_pv[k, ti]: -g.pv_tan_phi}, 0.0, tag="pv_q")
            program.add_ineq({q_pv[k, ti]: -1.0, p_pv[k, ti]: -g.pv_tan_phi}, 0.0, tag="pv_q")

        if second:
            for k, g in enumerate(dgs):
                e = {name: arr[k, ti] for name, arr in ext.items()}
                program.add_eq({p_dg[k, ti]: 1.0, e["p_copy"]: -1.0, e["p_up"]: -1.0,
                                e["p_dn"]: 1.0}, 0.0, tag="redispatch")
                program.add_eq({q_dg[k, ti]: 1.0, e["q_copy"]: -1.0, e["q_up"]: -1.0,
                                e["q_dn"]: 1.0}, 0.0, tag="redispatch")
                # up <= max - copy, down <= copy
                program.add_ineq({e["p_up"]: 1.0, e["p_copy"]: 1.0}, g.p_max, tag="redispatch_bound")
                program.add_ineq({e["p_dn"]: 1.0, e["p_copy"]: -1.0}, 0.0, tag="redispatch_bound")
                program.add_ineq({e["q_up"]: 1.0, e["q_copy"]: 1.0}, g.q_max, tag="redispatch_bound")
                program.add_ineq({e["q_dn"]: 1.0, e["q_copy"]: -1.0}, 0.0, tag="redispatch_bound")

    program.add_objective(lin, constant=const)
    common = dict(stage=stage, hours=hours, p_dg=p_dg, q_dg=q_dg, p_pv=p_pv, q_pv=q_pv,
                  p_inj=p_inj, q_inj=q_inj, tp=tp, tq=tq, l=l, v=v, soc_ids=soc_ids,
                  pv_avail=np.array(tables.pv_avail, dtype=float),
                  r=np.array([ln.r for ln in lines]), weight=weight)
    if second:
        return SecondStageVars(**common, **ext)
    return FirstStageVars(**common)


def _check_tables(model, tables):
    if tables.pv_avail.shape[0] != len(model.pvs) or tables.load_p.shape[0] != len(model.buses):
        raise ValueError("forecast tables do not cover every device")
    if tables.pv_avail.shape[1] != len(tables.hours) or tables.load_p.shape[1] != len(tables.hours):
        raise ValueError("forecast tables do not cover every time step")
    islands_without_ref = [isl for isl in model.islands
                           if not any(model.bus(i).is_reference for i in isl)]
    if islands_without_ref:
        raise ValueError(f"bus {islands_without_ref[0][0]} has no island reference bus")


def build_first_stage(model, tables, costs, program=None):
    """First-stage fragment against the forecast ``tables``."""
    _check_tables(model, tables)
    program = program if program is not None else ConicProgram("first-stage")
    return program, _stage(program, model, tables, costs, "f", 1.0, second=False)


def build_second_stage(model, tables, costs, pi_s, program=None, scenario=0):
    """Scenario fragment with re-dispatch; its cost terms carry weight ``pi_s``."""
    _check_tables(model, tables)
    program = program if program is not None else ConicProgram(f"scenario-{scenario}")
    return program, _stage(program, model, tables, costs, scenario, float(pi_s), second=True)


def build_centralized(model, scenario_set, costs):
    """Monolithic program: both stages, all scenarios, and coupling rows."""
    program = ConicProgram("centralized")
    _, first = build_first_stage(model, realize(scenario_set, model, FORECAST), costs, program)
    second = []
    for s, sc in enumerate(scenario_set.scenarios):
        _, sv = build_second_stage(model, realize(scenario_set, model, s), costs,
                                   sc.probability, program, scenario=s)
        second.append(sv)
        for a, b in zip(first.coupling, sv.coupling):
            program.add_eq({int(a): 1.0, int(b): -1.0}, 0.0, tag="coupling")
    return program, CentralizedVars(first, second, scenario_set.probabilities)


def stage_cost(vars_, x, costs):
    """Unweighted physical cost of one stage at primal point ``x``."""
    losses = float(np.sum(vars_.r[:, None] * x[vars_.l]))
    curtail = float(np.sum(vars_.pv_avail - x[vars_.p_pv]))
    cost = costs.c_loss * losses + costs.c_pv * curtail
    if isinstance(vars_, SecondStageVars):
        redispatch = sum(float(np.sum(x[a])) for a in (vars_.p_up, vars_.p_dn,
                                                         vars_.q_up, vars_.q_dn))
        cost += costs.c_dg * redispatch
    return cost


def max_cone_gap(vars_list, x_list, programs):
    """Largest relative cone residual magnitude over all stage cones."""
    worst = 0.0
    for vars_, x, prog in zip(vars_list, x_list, programs):
        for k in vars_.soc_ids.ravel():
            worst = max(worst, abs(prog.soc_residual_at(x, int(k), relative=True)))
    return worst


@dataclass
class StageDispatch:
    stage: object
    probability: float
    dg_p: np.ndarray
    dg_q: np.ndarray
    pv_p: np.ndarray
    pv_q: np.ndarray
    curtailment: np.ndarray
    losses: np.ndarray
    voltages: np.ndarray
    flows_p: np.ndarray
    flows_q: np.ndarray
    cost: float
    redispatch: np.ndarray = None


@dataclass
class DispatchSchedule:
    hours: tuple
    first: StageDispatch
    second: list = field(default_factory=list)
    max_cone_gap: float = 0.0

    @property
    def first_stage_cost(self):
        return self.first.cost

    @property
    def second_stage_cost(self):
        return float(sum(sd.probability * sd.cost for sd in self.second))

    @property
    def total_cost(self):
        return self.first_stage_cost + self.second_stage_cost

    def records(self, model):
        """Long-format rows ``(entity, t, scenario, quantity, value)``."""
        rows = []

        def emit(stage, name, ents, arr):
            for e, row in zip(ents, arr):
                for t, val in zip(self.hours, row):
                    rows.append((e, t, stage, name, float(val)))

        dg_ids = [f"DG{g.bus}" for g in model.dgs]
        pv_ids = [f"PV{g.bus}" for g in model.pvs]
        bus_ids = [f"bus{b.id}" for b in model.buses]
        line_ids = [f"line{ln.from_bus}-{ln.to_bus}" for ln in model.lines]
        for sd in [self.first] + self.second:
            st = "forecast" if sd.stage == "f" else f"s{sd.stage + 1}"
            emit(st, "P_DG", dg_ids, sd.dg_p)
            emit(st, "Q_DG", dg_ids, sd.dg_q)
            emit(st, "P_PV", pv_ids, sd.pv_p)
            emit(st, "Q_PV", pv_ids, sd.pv_q)
            emit(st, "curtailment", pv_ids, sd.curtailment)
            emit(st, "losses", ["system"], sd.losses[None, :])
            emit(st, "v", bus_ids, sd.voltages)
            emit(st, "T_P", line_ids, sd.flows_p)
            emit(st, "T_Q", line_ids, sd.flows_q)
            if sd.redispatch is not None:
                emit(st, "redispatch", dg_ids, sd.redispatch)
        return rows

    def to_csv(self, model):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["entity", "t", "scenario", "quantity", "value"])
        w.writerows(self.records(model))
        return buf.getvalue()

    def to_json(self):
        def stage(sd):
            out = {"stage": sd.stage, "probability": sd.probability, "cost": sd.cost}
            for name in ("dg_p", "dg_q", "pv_p", "pv_q", "curtailment", "losses",
                         "voltages", "flows_p", "flows_q", "redispatch"):
                val = getattr(sd, name)
                out[name] = None if val is None else np.asarray(val).tolist()
            return out

        return json.dumps({"hours": list(self.hours), "total_cost": self.total_cost,
                           "first_stage_cost": self.first_stage_cost,
                           "second_stage_cost": self.second_stage_cost,
                           "max_cone_gap": self.max_cone_gap,
                           "first": stage(self.first),
                           "second": [stage(sd) for sd in self.second]}, indent=1)


def _stage_dispatch(vars_, x, costs, probability):
    curtail = vars_.pv_avail - x[vars_.p_pv]
    curtail = np.where(curtail > -1e-9, np.maximum(curtail, 0.0), curtail)
    redispatch = None
    if isinstance(vars_, SecondStageVars):
        redispatch = x[vars_.p_up] + x[vars_.p_dn] + x[vars_.q_up] + x[vars_.q_dn]
    return StageDispatch(
        stage=vars_.stage,
        probability=probability,
        dg_p=x[vars_.p_dg], dg_q=x[vars_.q_dg],
        pv_p=x[vars_.p_pv], pv_q=x[vars_.q_pv],
        curtailment=curtail,
        losses=(vars_.r[:, None] * x[vars_.l]).sum(axis=0),
        voltages=np.sqrt(np.maximum(x[vars_.v], 0.0)),
        flows_p=x[vars_.tp], flows_q=x[vars_.tq],
        cost=stage_cost(vars_, x, costs),
        redispatch=redispatch,
    )


def schedule_from_parts(first_vars, x_first, second_vars, x_second, probabilities, costs,
                        programs=None):
    """Assemble a schedule from per-stage primal points (one program per stage)."""
    first = _stage_dispatch(first_vars, x_first, costs, 1.0)
    second = [_stage_dispatch(sv, xs, costs, float(p))
              for sv, xs, p in zip(second_vars, x_second, probabilities)]
    gap = 0.0
    if programs is not None:
        gap = max_cone_gap([first_vars] + list(second_vars), [x_first] + list(x_second),
                           programs)
    return DispatchSchedule(tuple(first_vars.hours), first, second, gap)


def extract_dispatch(solution, vars_, model=None, costs=None, rtol=1e-6):
    """Schedule from a centralized solution, checking costs against the objective."""
    if not solution.optimal:
        raise ProgramError(f"cannot extract a dispatch from a {solution.status} solution")
    x = solution.x
    prog = solution.program
    sched = schedule_from_parts(vars_.first, x, vars_.second, [x] * len(vars_.second),
                                vars_.probabilities, costs,
                                programs=[prog] * (1 + len(vars_.second)))
    obj = solution.objective
    if abs(sched.total_cost - obj) > rtol * max(1.0, abs(obj)):
        raise ConsistencyError(f"recomputed cost {sched.total_cost!r} differs from "
                               f"solver objective {obj!r}")
    return sched
