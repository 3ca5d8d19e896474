"""Brute-force reference solver for tiny radial instances.

Every DG except one sitting on the reference bus is swept over a regular
grid of (P, Q) setpoints, PV units over their available active power.  The
reference-bus DG balances the feeder.  For each point the exact (non-convex)
branch-flow equations are solved by backward/forward sweeps, so no
relaxation is involved; infeasible points are discarded and the cheapest
remaining one wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Bus, Generator, Line, NetworkModel, dfs_order
from .scenarios import FORECAST, Profile, ScenarioSet, ErrorScenario, realize

__all__ = ["OracleResult", "OracleError", "brute_force", "oracle_cost", "small_instance",
           "small_scenarios"]

MAX_POINTS = 50_000_000
CHUNK = 500_000


class OracleError(ValueError):
    pass


@dataclass
class OracleResult:
    cost: float
    setpoints: dict
    n_points: int
    n_feasible: int


def _axis(lo, hi, step):
    n = int(np.floor((hi - lo) / step + 1e-9))
    return lo + step * np.arange(n + 1)


def _sweep(model, order, p_net, q_net, tol=1e-13, max_iter=200):
    """Exact branch flows for net injections ``p_net``/``q_net`` of shape (n_bus, m)."""
    pos = {b.id: k for k, b in enumerate(model.buses)}
    parent = model.parent_line()
    kids = model.children()
    lines = model.lines
    m = p_net.shape[1]
    nl = len(lines)
    tp = np.zeros((nl, m))
    tq = np.zeros((nl, m))
    l = np.zeros((nl, m))
    v = np.ones((len(model.buses), m))
    for _ in range(max_iter):
        # backward: flow into each bus feeds its load and its children
        for bus in reversed(order):
            if bus not in parent:
                continue
            k = parent[bus]
            j = pos[bus]
            out_p = sum((tp[c] for c in kids.get(bus, ())), np.zeros(m))
            out_q = sum((tq[c] for c in kids.get(bus, ())), np.zeros(m))
            tp[k] = out_p + lines[k].r * l[k] - p_net[j]
            tq[k] = out_q + lines[k].x * l[k] - q_net[j]
        # forward: voltages from the reference outwards, then currents
        l_new = np.empty_like(l)
        for bus in order:
            if bus not in parent:
                continue
            k = parent[bus]
            ln = lines[k]
            i, j = pos[ln.from_bus], pos[bus]
            v[j] = v[i] - 2 * (ln.r * tp[k] + ln.x * tq[k]) + (ln.r ** 2 + ln.x ** 2) * l[k]
            with np.errstate(divide="ignore", invalid="ignore"):
                l_new[k] = (tp[k] ** 2 + tq[k] ** 2) / v[i]
        delta = np.max(np.abs(l_new - l), initial=0.0)
        l = l_new
        if not np.isfinite(delta) or delta < tol:
            break
    return tp, tq, l, v


def brute_force(model, tables, costs, step=1e-3):
    """Cheapest single-hour dispatch of ``model`` found by exhaustive search."""
    if len(tables.hours) != 1:
        raise OracleError("the oracle handles a single hour only")
    refs = model.reference_buses
    if len(refs) != 1:
        raise OracleError("the oracle needs exactly one reference bus")
    slack = [k for k, g in enumerate(model.dgs) if g.bus == refs[0]]
    if not slack:
        raise OracleError("the oracle needs a DG on the reference bus to balance the feeder")
    slack = slack[0]
    dgs, pvs = model.dgs, model.pvs
    avail = tables.pv_avail[:, 0]
    axes, names = [], []
    for k, g in enumerate(dgs):
        if k == slack:
            continue
        axes += [_axis(g.p_min, g.p_max, step), _axis(g.q_min, g.q_max, step)]
        names += [("P_DG", g.bus), ("Q_DG", g.bus)]
    for k, g in enumerate(pvs):
        if g.pv_tan_phi:
            raise OracleError("PV reactive support is not swept; use tan_phi = 0")
        axes.append(_axis(0.0, float(avail[k]), step))
        names.append(("P_PV", g.bus))
    n_points = int(np.prod([len(a) for a in axes])) if axes else 1
    if n_points > MAX_POINTS:
        raise OracleError(f"grid has {n_points} points, limit is {MAX_POINTS}")

    pos = {b.id: k for k, b in enumerate(model.buses)}
    order = dfs_order(model)
    load_p = tables.load_p[:, 0]
    load_q = tables.load_q[:, 0]
    g_slack = dgs[slack]
    root = pos[refs[0]]
    out_lines = model.children().get(refs[0], ())
    r = np.array([ln.r for ln in model.lines])

    best_cost, best_pt, best_slack, n_ok = np.inf, None, None, 0
    shape = tuple(len(a) for a in axes)
    for start in range(0, n_points, CHUNK):
        flat = np.arange(start, min(start + CHUNK, n_points))
        idx = np.unravel_index(flat, shape) if axes else ()
        vals = np.column_stack([a[i] for a, i in zip(axes, idx)]) if axes else np.zeros((1, 0))
        m = vals.shape[0]
        p_net = np.repeat(-load_p[:, None], m, axis=1)
        q_net = np.repeat(-load_q[:, None], m, axis=1)
        col = 0
        for k, g in enumerate(dgs):
            if k == slack:
                continue
            p_net[pos[g.bus]] += vals[:, col]
            q_net[pos[g.bus]] += vals[:, col + 1]
            col += 2
        pv_used = np.zeros((len(pvs), m))
        for k, g in enumerate(pvs):
            p_net[pos[g.bus]] += vals[:, col]
            pv_used[k] = vals[:, col]
            col += 1
        tp, tq, l, v = _sweep(model, order, p_net, q_net)
        # reference-bus DG covers whatever leaves the root plus the root's own net load
        p_sl = sum((tp[c] for c in out_lines), np.zeros(m)) - p_net[root]
        q_sl = sum((tq[c] for c in out_lines), np.zeros(m)) - q_net[root]
        ok = np.all(np.isfinite(l), axis=0)
        ok &= (p_sl >= g_slack.p_min - 1e-12) & (p_sl <= g_slack.p_max + 1e-12)
        ok &= (q_sl >= g_slack.q_min - 1e-12) & (q_sl <= g_slack.q_max + 1e-12)
        for k, b in enumerate(model.buses):
            ok &= (v[k] >= b.v_min_sq - 1e-12) & (v[k] <= b.v_max_sq + 1e-12)
        for k, ln in enumerate(model.lines):
            ok &= (tp[k] >= ln.tp_min) & (tp[k] <= ln.tp_max)
            ok &= (tq[k] >= ln.tq_min) & (tq[k] <= ln.tq_max)
        cost = costs.c_loss * (r @ l) + costs.c_pv * np.sum(avail[:, None] - pv_used, axis=0)
        cost = np.where(ok, cost, np.inf)
        n_ok += int(ok.sum())
        j = int(np.argmin(cost))
        if cost[j] < best_cost:
            best_cost, best_pt, best_slack = float(cost[j]), vals[j], (p_sl[j], q_sl[j])
    if best_pt is None:
        raise OracleError("no feasible grid point")
    setpoints = dict(zip(names, (float(x) for x in best_pt)))
    setpoints[("P_DG", g_slack.bus)] = float(best_slack[0])
    setpoints[("Q_DG", g_slack.bus)] = float(best_slack[1])
    return OracleResult(best_cost, setpoints, n_points, n_ok)


def oracle_cost(model, scenario_set, costs, step=1e-3):
    """Two-stage cost for a scenario set whose scenarios all equal the forecast.

    With nothing to correct, re-dispatch is never worth paying for, so the
    optimum repeats the best first-stage dispatch in every stage.
    """
    if any(s.rho_load != 1 or s.rho_pv != 1 for s in scenario_set.scenarios):
        raise OracleError("the oracle only covers scenarios equal to the forecast")
    res = brute_force(model, realize(scenario_set, model, FORECAST), costs, step)
    weight = 1.0 + float(np.sum(scenario_set.probabilities))
    return weight * res.cost, res


def small_instance(n_bus):
    """Two- or three-bus feeder with a balancing DG on bus 1."""
    vmin, vmax = 0.95 ** 2, 1.05 ** 2
    if n_bus == 2:
        buses = [Bus(1, vmin, vmax, True), Bus(2, vmin, vmax, False, 0.4, 0.2)]
        lines = [Line(1, 2, 0.02, 0.04)]
        gens = [Generator(1, "DG", 0.0, 2.0, 0.0, 2.0), Generator(2, "DG", 0.0, 0.3, 0.0, 0.1)]
    elif n_bus == 3:
        buses = [Bus(1, vmin, vmax, True), Bus(2, vmin, vmax, False, 0.3, 0.1),
                 Bus(3, vmin, vmax, False, 0.2, 0.1)]
        lines = [Line(1, 2, 0.03, 0.02), Line(2, 3, 0.02, 0.03)]
        gens = [Generator(1, "DG", 0.0, 2.0, 0.0, 2.0), Generator(3, "DG", 0.0, 0.6, 0.0, 0.4),
                Generator(2, "PV", 0.0, 0.05, 0.0, 0.0)]
    else:
        raise ValueError("small instances exist for 2 and 3 buses")
    return NetworkModel(buses, lines, gens, name=f"small{n_bus}")


def small_scenarios(pv=1.0, load=1.0):
    """Single-hour deterministic scenario set."""
    return ScenarioSet(Profile((0,), [pv]), Profile((0,), [load]), [ErrorScenario(1.0, 1.0, 1.0)])
