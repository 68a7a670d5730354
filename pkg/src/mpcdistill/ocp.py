"""Finite-horizon economic optimal control by direct single shooting.

The decision variables are the ``N`` controls; states come from forward
simulation. The objective is minus the summed product concentration over
steps ``1..N``. Minimization uses box-constrained L-BFGS (scipy's L-BFGS-B)
from several initial profiles.
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy.optimize import minimize

from .dynamics import (
    X3_MIN,
    ModelConfig,
    _period,
    _rhs_jac,
    _simulate_into,
    check_controls,
    simulate,
)
from .errors import ConfigError, DomainError, SolverError

logger = logging.getLogger(__name__)

MULTISTART_KINDS = ("min", "max", "mid", "random")


@dataclass(frozen=True)
class OcpProblem:
    x0: np.ndarray
    w: np.ndarray
    N: int
    cfg: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float).copy()
        w = np.asarray(self.w, dtype=float).copy()
        if x0.shape != (3,) or w.shape != (3,):
            raise ValueError("x0 and w must each have 3 components")
        if self.N < 0:
            raise ValueError(f"horizon N must be >= 0, got {self.N}")
        if not x0[2] > X3_MIN:
            raise DomainError(f"initial x3={x0[2]!r} must exceed {X3_MIN:g}")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "w", w)


@dataclass(frozen=True)
class SolverOptions:
    """Stopping rules and multistart set for :func:`solve_ocp`.

    ``multistart`` entries are ``"min"``, ``"max"``, ``"mid"`` (constant
    profiles) or ``"random"`` (uniform in the box, drawn from
    ``random_seed``). ``initial_profiles`` adds explicit starts after those.
    ``gradient`` selects the exact discrete adjoint or the finite-difference
    gradient of :func:`cost_gradient`.
    """

    max_iterations: int = 2000
    gradient_tolerance: float = 1e-6
    step_tolerance: float = 1e-10
    stall_iterations: int = 5
    multistart: tuple[str, ...] = MULTISTART_KINDS
    initial_profiles: tuple = ()
    random_seed: int = 0
    finite_difference_epsilon: float = 1e-6
    gradient: str = "adjoint"
    memory: int = 10

    def __post_init__(self):
        for name in ("gradient_tolerance", "step_tolerance", "finite_difference_epsilon"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"solver.{name} must be positive")
        if self.max_iterations < 1 or self.stall_iterations < 1:
            raise ConfigError("solver.max_iterations and solver.stall_iterations must be >= 1")
        unknown = set(self.multistart) - set(MULTISTART_KINDS)
        if unknown:
            raise ConfigError(f"solver.multistart has unknown entries {sorted(unknown)}")
        if not self.multistart and not self.initial_profiles:
            raise ConfigError("solver needs at least one initial profile")
        if self.gradient not in ("adjoint", "fd"):
            raise ConfigError(f"solver.gradient must be 'adjoint' or 'fd', got {self.gradient!r}")
        object.__setattr__(self, "multistart", tuple(self.multistart))


@dataclass
class OcpSolution:
    u_star: np.ndarray
    j_star: float
    trajectory: np.ndarray
    converged: bool
    iterations: int
    wall_time: float
    start_index: int = 0
    starts: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# cost and gradients
# ---------------------------------------------------------------------------


def trajectory_cost(states: np.ndarray) -> float:
    """Economic cost of a state trajectory (row 0 is the initial state)."""
    return -float(np.sum(states[1:, 1]))


def cost(u_seq, x0, w, cfg: ModelConfig) -> float:
    return trajectory_cost(simulate(x0, u_seq, w, cfg))


@nb.njit(cache=True)
def _tail_sum(states, u, j, uj, w, h, substeps):
    # product summed over steps j+1..N when u[j] is replaced by uj
    a, b, c = states[j, 0], states[j, 1], states[j, 2]
    a, b, c, ok = _period(a, b, c, uj, w[0], w[1], w[2], h, substeps)
    if not ok:
        return np.nan
    s = b
    for k in range(j + 1, u.shape[0]):
        a, b, c, ok = _period(a, b, c, u[k], w[0], w[1], w[2], h, substeps)
        if not ok:
            return np.nan
        s += b
    return s


@nb.njit(cache=True)
def _fd_gradient(states, u, w, h, substeps, eps, lo, hi):
    n = u.shape[0]
    g = np.empty(n)
    for j in range(n):
        up = u[j] + eps
        um = u[j] - eps
        if up > hi:
            g[j] = -(_tail_sum(states, u, j, u[j], w, h, substeps)
                     - _tail_sum(states, u, j, um, w, h, substeps)) / eps
        elif um < lo:
            g[j] = -(_tail_sum(states, u, j, up, w, h, substeps)
                     - _tail_sum(states, u, j, u[j], w, h, substeps)) / eps
        else:
            g[j] = -(_tail_sum(states, u, j, up, w, h, substeps)
                     - _tail_sum(states, u, j, um, w, h, substeps)) / (2.0 * eps)
    return g


def cost_gradient(u_seq, x0, w, cfg: ModelConfig, epsilon: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of :func:`cost`.

    The step is ``epsilon * (u_max - u_min)``. Where a perturbed control would
    leave the box the difference becomes one-sided. Only the trajectory tail
    after the perturbed step is re-simulated, so the unchanged prefix of the
    sum cancels exactly.
    """
    u = check_controls(u_seq, cfg)
    w = np.ascontiguousarray(w, dtype=float)
    states = simulate(x0, u, w, cfg)
    eps = epsilon * (cfg.u_max - cfg.u_min)
    g = _fd_gradient(states, u, w, cfg.h, cfg.substeps, eps, cfg.u_min, cfg.u_max)
    if not np.all(np.isfinite(g)):
        raise DomainError("finite-difference perturbation left the model domain")
    return g


@nb.njit(cache=True)
def _rk4_tangent(x, u, w, h, x_out, tan):
    """RK4 step that also propagates ``tan`` = d(state)/d(x_start, u), shape (3, 4)."""
    f = np.empty(3)
    jac = np.empty((3, 4))
    k = np.zeros((4, 3))
    dk = np.zeros((4, 3, 4))
    xs = np.empty(3)
    dxs = np.empty((3, 4))
    coef = (0.0, 0.5, 0.5, 1.0)
    for s in range(4):
        for i in range(3):
            if s == 0:
                xs[i] = x[i]
                for q in range(4):
                    dxs[i, q] = tan[i, q]
            else:
                xs[i] = x[i] + coef[s] * h * k[s - 1, i]
                for q in range(4):
                    dxs[i, q] = tan[i, q] + coef[s] * h * dk[s - 1, i, q]
        if xs[2] <= X3_MIN:
            return False
        _rhs_jac(xs[0], xs[1], xs[2], u, w, f, jac)
        for i in range(3):
            k[s, i] = f[i]
            for q in range(4):
                acc = jac[i, 3] if q == 3 else 0.0
                for l in range(3):
                    acc += jac[i, l] * dxs[l, q]
                dk[s, i, q] = acc
    for i in range(3):
        x_out[i] = x[i] + h / 6.0 * (k[0, i] + 2.0 * k[1, i] + 2.0 * k[2, i] + k[3, i])
        for q in range(4):
            tan[i, q] += h / 6.0 * (dk[0, i, q] + 2.0 * dk[1, i, q] + 2.0 * dk[2, i, q] + dk[3, i, q])
    return np.isfinite(x_out[0]) and np.isfinite(x_out[1]) and np.isfinite(x_out[2])


@nb.njit(cache=True)
def _cost_and_adjoint(x0, u, w, h, substeps):
    n = u.shape[0]
    states = np.empty((n + 1, 3))
    sens = np.empty((n, 3, 4))
    states[0] = x0
    tan = np.empty((3, 4))
    xc = np.empty(3)
    xn = np.empty(3)
    for kk in range(n):
        tan[:] = 0.0
        tan[0, 0] = 1.0
        tan[1, 1] = 1.0
        tan[2, 2] = 1.0
        xc[:] = states[kk]
        for _ in range(substeps):
            if not _rk4_tangent(xc, u[kk], w, h, xn, tan):
                return np.nan, np.empty(0), states, kk
            xc[:] = xn
        states[kk + 1] = xc
        sens[kk] = tan
    total = 0.0
    for kk in range(1, n + 1):
        total -= states[kk, 1]
    g = np.empty(n)
    # mu = dJ/dx_{k+1} including all downstream stage costs
    mu = np.zeros(3)
    mu[1] = -1.0
    for kk in range(n - 1, -1, -1):
        g[kk] = sens[kk, 0, 3] * mu[0] + sens[kk, 1, 3] * mu[1] + sens[kk, 2, 3] * mu[2]
        if kk > 0:
            m0 = sens[kk, 0, 0] * mu[0] + sens[kk, 1, 0] * mu[1] + sens[kk, 2, 0] * mu[2]
            m1 = sens[kk, 0, 1] * mu[0] + sens[kk, 1, 1] * mu[1] + sens[kk, 2, 1] * mu[2]
            m2 = sens[kk, 0, 2] * mu[0] + sens[kk, 1, 2] * mu[1] + sens[kk, 2, 2] * mu[2]
            mu[0] = m0
            mu[1] = m1 - 1.0
            mu[2] = m2
    return total, g, states, -1


def cost_and_adjoint_gradient(u_seq, x0, w, cfg: ModelConfig) -> tuple[float, np.ndarray]:
    """Cost and its exact gradient, by reverse sweep over the RK4 recursion."""
    u = check_controls(u_seq, cfg)
    x0 = np.ascontiguousarray(x0, dtype=float)
    w = np.ascontiguousarray(w, dtype=float)
    if u.size == 0:
        return 0.0, np.zeros(0)
    total, g, _, failed = _cost_and_adjoint(x0, u, w, cfg.h, cfg.substeps)
    if failed >= 0:
        raise DomainError(f"simulation failed at step {failed}")
    return float(total), g


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------


def initial_profiles(problem: OcpProblem, opts: SolverOptions) -> list[tuple[str, np.ndarray]]:
    cfg, n = problem.cfg, problem.N
    out = []
    for kind in opts.multistart:
        if kind == "min":
            out.append(("min", np.full(n, cfg.u_min)))
        elif kind == "max":
            out.append(("max", np.full(n, cfg.u_max)))
        elif kind == "mid":
            out.append(("mid", np.full(n, 0.5 * (cfg.u_min + cfg.u_max))))
        else:
            rng = np.random.default_rng(opts.random_seed)
            out.append(("random", rng.uniform(cfg.u_min, cfg.u_max, n)))
    for i, prof in enumerate(opts.initial_profiles):
        prof = np.asarray(prof, dtype=float)
        if prof.shape != (n,):
            raise ConfigError(f"initial profile {i} has shape {prof.shape}, expected ({n},)")
        out.append((f"profile{i}", np.clip(prof, cfg.u_min, cfg.u_max)))
    return out


class _Stall(Exception):
    pass


def _run_start(problem: OcpProblem, u0: np.ndarray, opts: SolverOptions) -> dict:
    cfg = problem.cfg
    if opts.gradient == "adjoint":
        def fun(u):
            return cost_and_adjoint_gradient(u, problem.x0, problem.w, cfg)
    else:
        def fun(u):
            u = np.clip(u, cfg.u_min, cfg.u_max)
            return (cost(u, problem.x0, problem.w, cfg),
                    cost_gradient(u, problem.x0, problem.w, cfg, opts.finite_difference_epsilon))

    f0 = cost(u0, problem.x0, problem.w, cfg)
    history = [f0]
    best = {"u": u0.copy(), "f": f0}

    def callback(intermediate_result):
        f = float(intermediate_result.fun)
        if f < best["f"]:
            best["u"] = np.array(intermediate_result.x, dtype=float)
            best["f"] = f
        history.append(best["f"])
        s = opts.stall_iterations
        if len(history) > s:
            old = history[-1 - s]
            if (old - best["f"]) <= opts.step_tolerance * max(abs(best["f"]), 1.0):
                raise StopIteration

    res = minimize(
        fun,
        u0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(cfg.u_min, cfg.u_max)] * problem.N,
        callback=callback,
        options={
            "maxiter": opts.max_iterations,
            "maxfun": max(15000, 20 * opts.max_iterations),
            "gtol": opts.gradient_tolerance,
            "ftol": 0.0,
            "maxcor": opts.memory,
        },
    )
    if res.fun < best["f"]:
        best["u"] = np.array(res.x, dtype=float)
        best["f"] = float(res.fun)
    # scipy reports status 99 and a "callback" message for StopIteration
    stalled = res.status == 99 or "callback" in str(res.message).lower()
    return {
        "u": best["u"],
        "iterations": int(res.nit),
        "converged": bool(res.status == 0 or stalled),
        "status": int(res.status),
        "message": str(res.message),
        "history": history,
    }


def solve_ocp(problem: OcpProblem, opts: SolverOptions | None = None) -> OcpSolution:
    """Minimize the economic cost over box-constrained control sequences.

    Each initial profile is refined independently; the cheapest converged
    candidate wins (ties go to the earlier start). When no start satisfies the
    stopping rules the cheapest iterate overall is returned with
    ``converged=False``.
    """
    opts = opts or SolverOptions()
    cfg = problem.cfg
    t0 = time.perf_counter()
    if problem.N == 0:
        traj = simulate(problem.x0, np.zeros(0), problem.w, cfg)
        return OcpSolution(np.zeros(0), 0.0, traj, True, 0, time.perf_counter() - t0)

    starts = []
    for idx, (name, u0) in enumerate(initial_profiles(problem, opts)):
        try:
            run = _run_start(problem, u0, opts)
            u = np.clip(run["u"], cfg.u_min, cfg.u_max)
            run.update(u=u, cost=cost(u, problem.x0, problem.w, cfg), error=None)
        except DomainError as exc:
            run = {"u": None, "cost": np.inf, "converged": False, "iterations": 0,
                   "status": -1, "message": str(exc), "history": [], "error": str(exc)}
        run.update(index=idx, name=name, initial_cost=_safe_cost(u0, problem))
        starts.append(run)

    ok = [s for s in starts if s["error"] is None]
    if not ok:
        raise SolverError(
            f"all {len(starts)} starts failed for x0={problem.x0.tolist()}, w={problem.w.tolist()}",
            diagnostics=[{"name": s["name"], "message": s["message"]} for s in starts],
        )
    converged = [s for s in ok if s["converged"]]
    pool = converged or ok
    chosen = min(pool, key=lambda s: (s["cost"], s["index"]))
    traj = simulate(problem.x0, chosen["u"], problem.w, cfg)
    return OcpSolution(
        u_star=chosen["u"],
        j_star=trajectory_cost(traj),
        trajectory=traj,
        converged=bool(converged),
        iterations=sum(s["iterations"] for s in starts),
        wall_time=time.perf_counter() - t0,
        start_index=chosen["index"],
        starts=[{k: v for k, v in s.items() if k != "u"} for s in starts],
    )


def _safe_cost(u, problem: OcpProblem) -> float:
    try:
        return cost(u, problem.x0, problem.w, problem.cfg)
    except DomainError:
        return np.inf


def brute_force_ocp(problem: OcpProblem, control_grid, max_sequences: int = 10**6):
    """Exhaustive minimum over all control sequences drawn from ``control_grid``.

    Sequences are visited in lexicographic order of grid indices and only a
    strictly lower cost replaces the incumbent, so ties resolve to the first
    sequence in that order.
    """
    grid = [float(v) for v in control_grid]
    n = problem.N
    if not grid:
        raise ValueError("control grid is empty")
    if len(grid) ** n > max_sequences:
        raise ValueError(f"|grid|^N = {len(grid)}^{n} exceeds the enumeration budget {max_sequences}")
    best_u, best_j = None, np.inf
    for combo in itertools.product(grid, repeat=n):
        j = cost(np.array(combo), problem.x0, problem.w, problem.cfg)
        if j < best_j:
            best_u, best_j = np.array(combo), j
    return best_u, best_j
