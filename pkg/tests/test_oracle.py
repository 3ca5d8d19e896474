import pytest

from sopf.conic import solve
from sopf.grid import CostCoefficients
from sopf.opf import build_centralized
from sopf.oracle import OracleError, brute_force, oracle_cost, small_instance, small_scenarios
from sopf.scenarios import ErrorScenario, ScenarioSet, realize, FORECAST


def test_two_bus_matches_conic_model():
    m, s, c = small_instance(2), small_scenarios(), CostCoefficients()
    brute, res = oracle_cost(m, s, c)
    cone = solve(build_centralized(m, s, c)[0]).objective
    assert abs(cone - brute) / brute <= 1e-3
    assert res.n_feasible > 0


def test_coarse_grid_is_never_cheaper_than_relaxation():
    m, s, c = small_instance(3), small_scenarios(), CostCoefficients()
    brute, _ = oracle_cost(m, s, c, step=0.02)
    cone = solve(build_centralized(m, s, c)[0]).objective
    assert brute >= cone - 1e-9


def test_oracle_rejects_unsupported_inputs():
    m, s, c = small_instance(2), small_scenarios(), CostCoefficients()
    shifted = ScenarioSet(s.forecast_pv, s.forecast_load, [ErrorScenario(1.0, 1.1, 1.0)])
    with pytest.raises(OracleError):
        oracle_cost(m, shifted, c)
    with pytest.raises(OracleError):
        brute_force(m, realize(s, m, FORECAST), c, step=1e-7)
    with pytest.raises(ValueError):
        small_instance(4)
