"""Analytical target cascading over scenarios.

The master holds one target vector ``z`` for the coupled DG setpoints
(active and reactive, per DG and hour).  The first-stage subproblem and
every scenario subproblem are pulled towards ``z`` by an augmented
Lagrangian term ``alpha.(z - x) + ||beta o (z - x)||^2``; the master then
re-centres ``z`` in closed form and the multipliers are updated with the
classical method-of-multipliers step.  Lower-level subproblems are
independent within an iteration and can run on a process pool.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .conic import ClarabelBackend, solve
from .opf import build_first_stage, build_second_stage, schedule_from_parts
from .scenarios import FORECAST, realize

__all__ = [
    "AtcConfig",
    "AtcState",
    "AtcResult",
    "AtcError",
    "Subproblem",
    "LowerLevelPool",
    "initial_state",
    "solve_master",
    "build_fsp",
    "build_ssp",
    "update_multipliers",
    "check_convergence",
    "max_gap",
    "build_subproblems",
    "run_parallel_lower_level",
    "run_atc",
]


class AtcError(RuntimeError):
    """A lower-level subproblem could not be solved."""

    def __init__(self, subproblem, status, message=""):
        super().__init__(f"{subproblem}: {status} {message}".strip())
        self.subproblem = subproblem
        self.status = status


@dataclass(frozen=True)
class AtcConfig:
    alpha0: float = 2.0
    beta0: float = 2.0
    lam: float = 1.0
    epsilon: float = 5e-4
    max_iters: int = 500
    mode: str = "serial"
    workers: int = 1
    # False drops the probability weight from the scenario penalty terms
    weight_ssp_penalty: bool = True
    # also require the master target to have settled (max |z - z_prev| <= epsilon);
    # without it a deterministic case stops at once because every response agrees
    target_step: bool = True

    def __post_init__(self):
        if not self.beta0 > 0:
            raise ValueError("beta0 must be positive")
        if not self.lam >= 1:
            raise ValueError("lambda must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.mode not in ("serial", "parallel"):
            raise ValueError(f"mode must be 'serial' or 'parallel', got {self.mode!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @classmethod
    def from_dict(cls, data):
        """Accept CLI-style keys (``alpha``, ``beta``, ``lambda``, ``eps``) too."""
        alias = {"alpha": "alpha0", "beta": "beta0", "lambda": "lam", "eps": "epsilon"}
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {}
        for key, val in data.items():
            key = alias.get(key.replace("-", "_"), key.replace("-", "_"))
            if key not in known:
                raise ValueError(f"unknown ATC option {key!r}")
            kwargs[key] = val
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        if str(path).endswith(".toml"):
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        else:
            with open(path) as fh:
                data = json.load(fh)
        return cls.from_dict(data.get("atc", data))


@dataclass
class AtcState:
    """Coordinator state; all vectors follow the coupling layout.

    ``alpha_s``/``beta_s``/``x_s`` have one row per scenario.
    """

    iteration: int
    z: np.ndarray
    alpha_f: np.ndarray
    beta_f: np.ndarray
    alpha_s: np.ndarray
    beta_s: np.ndarray
    x_f: np.ndarray = None
    x_s: np.ndarray = None
    trace: list = field(default_factory=list)


@dataclass
class AtcResult:
    converged: bool
    iterations: int
    total_cost: float
    schedule: object
    trace: list
    state: AtcState
    wall_time: float
    mode: str = "serial"

    @property
    def first_stage_cost(self):
        return self.schedule.first_stage_cost

    @property
    def second_stage_cost(self):
        return self.schedule.second_stage_cost

    def trace_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "max_gap", "cost", "wall_ms"])
        for row in self.trace:
            w.writerow([row["iter"], repr(row["max_gap"]), repr(row["cost"]),
                        f"{row['wall_ms']:.3f}"])
        return buf.getvalue()


def initial_state(model, hours, n_scenarios, config):
    """Targets start at the middle of each DG's box; multipliers are broadcast."""
    z_p = [0.5 * (g.p_min + g.p_max) for g in model.dgs for _ in hours]
    z_q = [0.5 * (g.q_min + g.q_max) for g in model.dgs for _ in hours]
    z = np.array(z_p + z_q, dtype=float)
    n = len(z)
    return AtcState(
        iteration=1,
        z=z,
        alpha_f=np.full(n, float(config.alpha0)),
        beta_f=np.full(n, float(config.beta0)),
        alpha_s=np.full((n_scenarios, n), float(config.alpha0)),
        beta_s=np.full((n_scenarios, n), float(config.beta0)),
    )


def solve_master(state, pi):
    """Closed-form minimiser of the master objective, coordinate by coordinate."""
    pi = np.asarray(pi, dtype=float)[:, None]
    bf2 = 2.0 * state.beta_f ** 2
    bs2 = 2.0 * state.beta_s ** 2
    num = bf2 * state.x_f - state.alpha_f + np.sum(pi * (bs2 * state.x_s - state.alpha_s), axis=0)
    den = bf2 + np.sum(pi * bs2, axis=0)
    return num / den


def update_multipliers(state, lam):
    """One multiplier/penalty step; returns a new state with ``iteration + 1``."""
    gap_f = state.z - state.x_f
    gap_s = state.z[None, :] - state.x_s
    return replace(
        state,
        iteration=state.iteration + 1,
        alpha_f=state.alpha_f + 2.0 * state.beta_f ** 2 * gap_f,
        beta_f=lam * state.beta_f,
        alpha_s=state.alpha_s + 2.0 * state.beta_s ** 2 * gap_s,
        beta_s=lam * state.beta_s,
    )


def max_gap(state):
    gf = np.abs(state.z - state.x_f)
    gs = np.abs(state.z[None, :] - state.x_s) if state.x_s is not None and state.x_s.size else 0.0
    return float(max(np.max(gf, initial=0.0), np.max(gs, initial=0.0)))


def check_convergence(state, epsilon):
    return max_gap(state) <= epsilon


# -- subproblems ----------------------------------------------------------


@dataclass
class Subproblem:
    """A frozen lower-level program plus what the coordinator needs from it."""

    name: str
    program: object
    vars: object
    coupling: np.ndarray
    weight: float


def _penalised(sub, z, alpha, beta):
    """Program with ``weight * (alpha.(z - x) + beta^2 (z - x)^2)`` on the coupling."""
    prog = sub.program
    lin = prog.linear_objective.copy()
    quad = prog.quadratic_objective.copy()
    w = sub.weight
    b2 = beta ** 2
    np.add.at(lin, sub.coupling, w * (-alpha - 2.0 * b2 * z))
    np.add.at(quad, sub.coupling, w * b2)
    const = prog.constant + w * float(alpha @ z + b2 @ (z * z))
    return prog.with_objective(lin, quad, const)


def build_fsp(fragment, state):
    """First-stage subproblem for the current targets and multipliers.

    ``fragment`` is the ``(program, vars)`` pair from :func:`build_first_stage`.
    """
    program, vars_ = fragment
    sub = Subproblem("FSP", program.freeze(), vars_, vars_.coupling, 1.0)
    return _penalised(sub, state.z, state.alpha_f, state.beta_f)


def build_ssp(fragment, state, pi_s, s, weight_penalty=True):
    """Scenario ``s`` subproblem; the whole objective carries ``pi_s``."""
    program, vars_ = fragment
    w = float(pi_s) if weight_penalty else 1.0
    sub = Subproblem(f"SSP[{s}]", program.freeze(), vars_, vars_.coupling, w)
    return _penalised(sub, state.z, state.alpha_s[s], state.beta_s[s])


def build_subproblems(model, scenario_set, costs, weight_ssp_penalty=True):
    """Frozen base programs: index 0 is the FSP, index ``s + 1`` is scenario ``s``."""
    prog, fv = build_first_stage(model, realize(scenario_set, model, FORECAST), costs)
    subs = [Subproblem("FSP", prog.freeze(), fv, fv.coupling, 1.0)]
    for s, sc in enumerate(scenario_set.scenarios):
        prog, sv = build_second_stage(model, realize(scenario_set, model, s), costs,
                                      sc.probability, scenario=s)
        w = sc.probability if weight_ssp_penalty else 1.0
        subs.append(Subproblem(f"SSP[{s}]", prog.freeze(), sv, sv.coupling, w))
    return subs


def _solve_one(sub, z, alpha, beta, backend):
    sol = solve(_penalised(sub, z, alpha, beta), backend)
    if not sol.optimal:
        raise AtcError(sub.name, sol.status, sol.message)
    return sol.x


_WORKER = {}


def _worker_init(subproblems, backend):
    _WORKER["subs"] = subproblems
    _WORKER["backend"] = backend


def _worker_task(k, z, alpha, beta):
    return _solve_one(_WORKER["subs"][k], z, alpha, beta, _WORKER["backend"])


class LowerLevelPool:
    """Runs every subproblem of one iteration, serially or on worker processes.

    Workers receive the frozen subproblems once at start-up; each iteration
    only ships targets and multipliers.  Results are gathered before
    returning, so the caller sees a barrier.
    """

    def __init__(self, subproblems, workers=1, parallel=False, backend=None):
        self.subproblems = subproblems
        self.workers = workers
        self.backend = backend or ClarabelBackend()
        self.parallel = parallel
        self._executor = None

    def __enter__(self):
        if self.parallel:
            self._executor = ProcessPoolExecutor(
                max_workers=self.workers, initializer=_worker_init,
                initargs=(self.subproblems, self.backend))
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def solve_all(self, tasks):
        """``tasks[k] = (z, alpha, beta)`` for subproblem ``k``; returns primal vectors."""
        if self._executor is None:
            return [_solve_one(sub, *task, self.backend)
                    for sub, task in zip(self.subproblems, tasks)]
        futures = [self._executor.submit(_worker_task, k, *task) for k, task in enumerate(tasks)]
        out = []
        for k, fut in enumerate(futures):
            try:
                out.append(fut.result())
            except AtcError:
                for f in futures:
                    f.cancel()
                raise
            except Exception as exc:
                for f in futures:
                    f.cancel()
                raise AtcError(self.subproblems[k].name, "worker-failure", repr(exc)) from exc
        return out


def run_parallel_lower_level(subproblems, pool, state):
    """Solve the FSP and all SSPs for ``state``; return ``(x_f, x_s, primals)``."""
    tasks = [(state.z, state.alpha_f, state.beta_f)]
    tasks += [(state.z, state.alpha_s[s], state.beta_s[s]) for s in range(len(subproblems) - 1)]
    primals = pool.solve_all(tasks)
    x_f = primals[0][subproblems[0].coupling]
    x_s = np.array([x[sub.coupling] for sub, x in zip(subproblems[1:], primals[1:])])
    return x_f, x_s.reshape(len(subproblems) - 1, len(x_f)), primals


def _physical_cost(subproblems, primals):
    # weights already sit in the scenario base objectives
    return float(sum(sub.program.objective_value(x) for sub, x in zip(subproblems, primals)))


def run_atc(model, scenario_set, costs, config=AtcConfig(), backend=None, callback=None):
    """Run the decomposition until the coupling gap drops below ``epsilon``.

    Hitting ``max_iters`` yields a result with ``converged=False``; an
    unsolvable subproblem raises :class:`AtcError`.
    """
    t_start = time.perf_counter()
    subs = build_subproblems(model, scenario_set, costs, config.weight_ssp_penalty)
    pi = scenario_set.probabilities
    state = initial_state(model, scenario_set.hours, len(scenario_set.scenarios), config)
    parallel = config.mode == "parallel"
    converged = False
    trace = []
    z_prev = state.z
    with LowerLevelPool(subs, config.workers, parallel, backend) as pool:
        for _ in range(config.max_iters):
            t_iter = time.perf_counter()
            x_f, x_s, primals = run_parallel_lower_level(subs, pool, state)
            state = replace(state, x_f=x_f, x_s=x_s)
            state = replace(state, z=solve_master(state, pi))
            gap = max_gap(state)
            step = float(np.max(np.abs(state.z - z_prev), initial=0.0))
            z_prev = state.z
            trace.append({"iter": state.iteration, "max_gap": gap, "target_step": step,
                          "cost": _physical_cost(subs, primals),
                          "wall_ms": 1e3 * (time.perf_counter() - t_iter)})
            if callback is not None:
                callback(state, trace[-1])
            if gap <= config.epsilon and (not config.target_step or step <= config.epsilon):
                converged = True
                break
            state = update_multipliers(state, config.lam)
    schedule = schedule_from_parts(subs[0].vars, primals[0], [s.vars for s in subs[1:]],
                                   primals[1:], pi, costs,
                                   programs=[s.program for s in subs])
    state.trace = trace
    return AtcResult(converged, len(trace), schedule.total_cost, schedule, trace, state,
                     time.perf_counter() - t_start, config.mode)


def default_workers():
    return max(1, min(4, os.cpu_count() or 1))


def config_to_dict(config):
    return asdict(config)
