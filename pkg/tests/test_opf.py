import numpy as np
import pytest

from sopf.conic import ConicProgram, ProgramError, solve
from sopf.grid import Bus, CostCoefficients, Generator, Line, NetworkModel, duplicate_system
from sopf.opf import (ConsistencyError, build_centralized, build_first_stage,
                      build_second_stage, extract_dispatch, coupling_layout)
from sopf.scenarios import (FORECAST, ErrorScenario, Profile, ScenarioSet, preset, realize)


@pytest.fixture(scope="module")
def s5_solution(feeder, costs):
    scen = preset("S5", 3)
    program, vars_ = build_centralized(feeder, scen, costs)
    sol = solve(program)
    assert sol.optimal
    return scen, program, vars_, sol


def two_bus(r=0.02, x=0.04):
    buses = [Bus(1, 0.9, 1.1, True), Bus(2, 0.9, 1.1, False, 0.4, 0.2)]
    return NetworkModel(buses, [Line(1, 2, r, x)], [Generator(1, "DG", 0.0, 2.0, 0.0, 2.0)])


def flat_set(pv=0.0, load=1.0, scen=((1.0, 1.0, 1.0),)):
    return ScenarioSet(Profile((0,), [pv]), Profile((0,), [load]),
                       [ErrorScenario(*s) for s in scen])


def test_first_stage_row_counts(feeder, costs):
    scen = preset("DET", 24)
    program, _ = build_first_stage(feeder, realize(scen, feeder, FORECAST), costs)
    counted = sum(program.count(t) for t in ("balance", "drop", "soc", "reference"))
    assert counted == 24 * (66 + 32 + 32 + 1)
    assert program.count("pv_q") == 24 * 6 * 2


def test_coupling_row_count(feeder, costs):
    program, _ = build_centralized(feeder, preset("S5", 6), costs)
    assert program.count("coupling") == 2 * 3 * 6 * 5
    assert len(coupling_layout(feeder, (0, 4))) == 2 * 3 * 2


def test_leaf_balance_row():
    m = two_bus()
    p, v = build_first_stage(m, realize(flat_set(), m, FORECAST), CostCoefficients())
    leaf = {int(v.p_inj[1, 0]): 1.0, int(v.tp[0, 0]): 1.0, int(v.l[0, 0]): -0.02}
    rows = [c for c, b in p.eqs if c == leaf]
    assert len(rows) == 1


def test_zero_impedance_keeps_voltage():
    m = two_bus(0.0, 0.0)
    prog, v = build_first_stage(m, realize(flat_set(), m, FORECAST), CostCoefficients())
    sol = solve(prog)
    assert sol.x[v.v[1, 0]] == pytest.approx(sol.x[v.v[0, 0]], abs=1e-8)


def _second_stage_probe(copy, up=None, dn=None, pmax=1.4):
    m = NetworkModel([Bus(1, 0.9, 1.1, True, 0.0, 0.0)], [],
                     [Generator(1, "DG", 0.0, pmax, 0.0, pmax)])
    prog, v = build_second_stage(m, realize(flat_set(load=0.0), m, 0), CostCoefficients(), 1.0)
    prog.add_eq({int(v.p_copy[0, 0]): 1.0}, copy)
    prog.add_eq({int(v.q_copy[0, 0]): 1.0}, 0.0)
    if up is not None:
        prog.add_eq({int(v.p_up[0, 0]): 1.0}, up)
    if dn is not None:
        prog.add_eq({int(v.p_dn[0, 0]): 1.0}, dn)
    return prog, v


def test_redispatch_arithmetic():
    prog, v = _second_stage_probe(0.5, up=0.2, dn=0.0)
    # drop the balance so the DG value is free to follow the redispatch rows
    prog.eqs = [(c, b) for c, b in prog.eqs if int(v.p_inj[0, 0]) not in c]
    sol = solve(prog)
    assert sol.x[v.p_dg[0, 0]] == pytest.approx(0.7, abs=1e-7)


def test_down_redispatch_bounded_by_copy():
    prog, v = _second_stage_probe(0.0, dn=0.1)
    assert solve(prog).status == "infeasible"


def test_up_redispatch_bounded_by_headroom():
    prog, v = _second_stage_probe(1.4, up=0.1)
    assert solve(prog).status == "infeasible"


def test_det_has_no_redispatch(feeder, costs):
    program, vars_ = build_centralized(feeder, preset("DET", 3), costs)
    sol = solve(program)
    sv = vars_.second[0]
    for arr in (sv.p_up, sv.p_dn, sv.q_up, sv.q_dn):
        assert np.max(sol.x[arr]) <= 1e-6


def test_conservation_telescopes(feeder, s5_solution):
    _, _, vars_, sol = s5_solution
    x = sol.x
    for stage in [vars_.first] + vars_.second:
        inj = x[stage.p_inj].sum(axis=0)
        loss = (stage.r[:, None] * x[stage.l]).sum(axis=0)
        assert np.allclose(inj, loss, atol=1e-7)


def test_redispatch_complementarity(s5_solution):
    _, _, vars_, sol = s5_solution
    for sv in vars_.second:
        assert np.max(np.minimum(sol.x[sv.p_up], sol.x[sv.p_dn])) <= 1e-6
        assert np.max(np.minimum(sol.x[sv.q_up], sol.x[sv.q_dn])) <= 1e-6


def test_coupling_copies_match(s5_solution):
    _, _, vars_, sol = s5_solution
    for sv in vars_.second:
        assert np.allclose(sol.x[vars_.first.coupling], sol.x[sv.coupling], atol=1e-7)


def test_relaxation_is_tight(feeder, costs, s5_solution):
    scen, _, vars_, sol = s5_solution
    sched = extract_dispatch(sol, vars_, feeder, costs)
    assert sched.max_cone_gap <= 1e-5


def test_extract_dispatch_totals(feeder, costs, s5_solution):
    scen, _, vars_, sol = s5_solution
    sched = extract_dispatch(sol, vars_, feeder, costs)
    weighted = sched.first_stage_cost + sum(p * sd.cost for p, sd in
                                            zip(scen.probabilities, sched.second))
    assert sched.total_cost == pytest.approx(weighted, rel=1e-12)
    assert sched.total_cost == pytest.approx(sol.objective, rel=1e-6)
    assert np.all(sched.first.curtailment >= -1e-9)
    assert np.all(sched.first.voltages >= 0.95 - 1e-6)
    assert np.all(sched.first.voltages <= 1.05 + 1e-6)


def test_extract_dispatch_rejects_mismatch(feeder, costs, s5_solution):
    _, _, vars_, sol = s5_solution
    tampered = type(sol)(sol.status, sol.x, sol.objective * 1.01, sol.solve_time,
                         sol.message, sol.program)
    with pytest.raises(ConsistencyError):
        extract_dispatch(tampered, vars_, feeder, costs)
    failed = type(sol)("infeasible", None, float("nan"), 0.0, "", sol.program)
    with pytest.raises(ProgramError):
        extract_dispatch(failed, vars_, feeder, costs)


def test_dispatch_exports(feeder, costs, s5_solution):
    import json

    _, _, vars_, sol = s5_solution
    sched = extract_dispatch(sol, vars_, feeder, costs)
    text = sched.to_csv(feeder)
    assert text.splitlines()[0] == "entity,t,scenario,quantity,value"
    assert "DG4,0,forecast,P_DG," in text
    doc = json.loads(sched.to_json())
    assert doc["total_cost"] == pytest.approx(sched.total_cost)
    assert len(doc["second"]) == 5


def test_night_hour_without_load_or_pv(costs):
    buses = [Bus(1, 0.9, 1.1, True), Bus(2, 0.9, 1.1, False, 0.3, 0.1)]
    m = NetworkModel(buses, [Line(1, 2, 0.02, 0.03)], [Generator(1, "DG", 0.0, 1.0, 0.0, 1.0),
                                                       Generator(2, "PV", 0.0, 1.0, 0, 0, 0.48)])
    program, vars_ = build_centralized(m, flat_set(pv=0.0, load=0.0), costs)
    sched = extract_dispatch(solve(program), vars_, m, costs)
    assert np.allclose(sched.first.losses, 0.0, atol=1e-9)
    assert np.allclose(sched.first.flows_p, 0.0, atol=1e-7)


def test_missing_reference_rejected(costs):
    buses = [Bus(1, 0.9, 1.1, False), Bus(2, 0.9, 1.1, False)]
    m = NetworkModel(buses, [Line(1, 2, 0.01, 0.01)], [])
    with pytest.raises(ValueError, match="reference"):
        build_centralized(m, flat_set(), costs)


def test_duplicated_system_cost_scales(feeder, costs):
    scen = preset("S5", 3)
    single = solve(build_centralized(feeder, scen, costs)[0]).objective
    double = solve(build_centralized(duplicate_system(feeder, 2), scen, costs)[0]).objective
    assert double == pytest.approx(2 * single, rel=1e-6)
