import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sopf.estimators import ATCDecomposition, CentralizedOPF


def test_params_and_clone():
    est = ATCDecomposition(alpha0=3.5, beta0=3.5)
    params = est.get_params()
    assert params["alpha0"] == 3.5 and params["lam"] == 1.0
    twin = clone(est).set_params(epsilon=1e-3)
    assert twin.epsilon == 1e-3 and est.epsilon == 5e-4
    assert twin.atc_config().epsilon == 1e-3


def test_not_fitted():
    with pytest.raises(NotFittedError):
        CentralizedOPF().total_cost_


def test_fit_centralized_and_atc(feeder):
    cen = CentralizedOPF(horizon=1).fit(feeder, "DET")
    atc = ATCDecomposition(horizon=1).fit("ieee33", "DET")
    assert cen.cost_ == pytest.approx(cen.total_cost_)
    assert atc.converged_ and atc.n_iter_ == len(atc.trace_)
    assert abs(atc.cost_ - cen.cost_) / cen.cost_ <= 1e-4
    assert atc.dispatch_csv().startswith("entity,t,scenario,quantity,value")


def test_cvxopt_backend_agrees(feeder):
    a = CentralizedOPF(horizon=1).fit(feeder, "DET")
    b = CentralizedOPF(horizon=1, backend="cvxopt", tol=1e-8).fit(feeder, "DET")
    assert b.cost_ == pytest.approx(a.cost_, rel=1e-5)
