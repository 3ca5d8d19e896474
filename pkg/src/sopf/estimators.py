"""Estimator-style front ends.

``fit(network, scenarios)`` solves the dispatch problem and stores the
results on trailing-underscore attributes, so the solvers can be configured
through ``get_params``/``set_params`` and cloned like any other estimator.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .atc import AtcConfig, run_atc
from .conic import ClarabelBackend, CvxoptBackend, ProgramError, solve
from .grid import CostCoefficients, NetworkModel, load_network
from .opf import build_centralized, extract_dispatch
from .scenarios import ScenarioSet, preset, validate_probabilities

__all__ = ["CentralizedOPF", "ATCDecomposition"]


def _backend(name, tol):
    if name == "clarabel":
        return ClarabelBackend(tol=tol)
    if name == "cvxopt":
        return CvxoptBackend(tol=tol)
    raise ValueError(f"unknown backend {name!r}")


def _inputs(network, scenarios, horizon):
    model = network if isinstance(network, NetworkModel) else load_network(network)
    if not isinstance(scenarios, ScenarioSet):
        scenarios = preset(scenarios, horizon)
    validate_probabilities(scenarios)
    return model, scenarios


class _DispatchEstimator(BaseEstimator):
    def _costs(self):
        return CostCoefficients(self.c_loss, self.c_pv, self.c_dg)

    @property
    def total_cost_(self):
        check_is_fitted(self, "schedule_")
        return self.schedule_.total_cost

    def dispatch_csv(self):
        check_is_fitted(self, "schedule_")
        return self.schedule_.to_csv(self.model_)


class CentralizedOPF(_DispatchEstimator):
    """Solve the full two-stage program in one conic solve."""

    def __init__(self, c_loss=60.0, c_pv=100.0, c_dg=10.0, backend="clarabel", tol=1e-9,
                 horizon=6):
        self.c_loss = c_loss
        self.c_pv = c_pv
        self.c_dg = c_dg
        self.backend = backend
        self.tol = tol
        self.horizon = horizon

    def fit(self, network, scenarios="S5"):
        model, scen = _inputs(network, scenarios, self.horizon)
        costs = self._costs()
        program, vars_ = build_centralized(model, scen, costs)
        sol = solve(program, _backend(self.backend, self.tol))
        if not sol.optimal:
            raise ProgramError(f"centralized solve failed: {sol.status} ({sol.message})")
        self.model_ = model
        self.solution_ = sol
        self.schedule_ = extract_dispatch(sol, vars_, model, costs)
        self.cost_ = self.schedule_.total_cost
        return self


class ATCDecomposition(_DispatchEstimator):
    """Scenario decomposition coordinated by analytical target cascading."""

    def __init__(self, alpha0=2.0, beta0=2.0, lam=1.0, epsilon=5e-4, max_iters=500,
                 mode="serial", workers=1, weight_ssp_penalty=True, target_step=True,
                 c_loss=60.0, c_pv=100.0, c_dg=10.0, backend="clarabel", tol=1e-9, horizon=6):
        self.alpha0 = alpha0
        self.beta0 = beta0
        self.lam = lam
        self.epsilon = epsilon
        self.max_iters = max_iters
        self.mode = mode
        self.workers = workers
        self.weight_ssp_penalty = weight_ssp_penalty
        self.target_step = target_step
        self.c_loss = c_loss
        self.c_pv = c_pv
        self.c_dg = c_dg
        self.backend = backend
        self.tol = tol
        self.horizon = horizon

    def atc_config(self):
        return AtcConfig(self.alpha0, self.beta0, self.lam, self.epsilon, self.max_iters,
                         self.mode, self.workers, self.weight_ssp_penalty, self.target_step)

    def fit(self, network, scenarios="S5", callback=None):
        model, scen = _inputs(network, scenarios, self.horizon)
        res = run_atc(model, scen, self._costs(), self.atc_config(),
                      _backend(self.backend, self.tol), callback)
        self.model_ = model
        self.result_ = res
        self.schedule_ = res.schedule
        self.cost_ = res.total_cost
        self.trace_ = res.trace
        self.n_iter_ = res.iterations
        self.converged_ = res.converged
        return self
