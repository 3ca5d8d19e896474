"""Reference minimiser of the master objective through a generic QP solve."""

import numpy as np

from sopf.atc import AtcState
from sopf.conic import ClarabelBackend, ConicProgram, solve


def qp_master(state, pi):
    n = len(state.z)
    p = ConicProgram("master")
    for k in range(n):
        p.add_variable(k)
    terms = [(1.0, state.alpha_f, state.beta_f, state.x_f)]
    terms += [(pi[s], state.alpha_s[s], state.beta_s[s], state.x_s[s]) for s in range(len(pi))]
    # expand w * (a (z - x) + b^2 (z - x)^2) term by term
    for w, a, b, x in terms:
        for k in range(n):
            b2 = b[k] ** 2
            p.add_objective({k: w * a[k] - 2 * w * b2 * x[k]}, {k: w * b2},
                            -w * a[k] * x[k] + w * b2 * x[k] ** 2)
    sol = solve(p, ClarabelBackend(tol=1e-12))
    assert sol.optimal
    return sol.x


def random_state(rng, max_coords=10, max_scen=5, beta=(0.1, 10.0)):
    n = int(rng.integers(1, max_coords + 1))
    s = int(rng.integers(1, max_scen + 1))
    pi = rng.dirichlet(np.ones(s))
    state = AtcState(
        iteration=1,
        z=np.zeros(n),
        alpha_f=rng.normal(0, 5, n),
        beta_f=rng.uniform(*beta, n),
        alpha_s=rng.normal(0, 5, (s, n)),
        beta_s=rng.uniform(*beta, (s, n)),
        x_f=rng.normal(0, 1, n),
        x_s=rng.normal(0, 1, (s, n)),
    )
    return state, pi
