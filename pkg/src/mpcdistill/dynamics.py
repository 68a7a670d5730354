"""Parallel reactor model, fixed-step integration and the measurement map.

States are ``(x1, x2, x3)``: reactant concentration, product concentration
and mixture temperature. Parameters are ``(w1, w2, w3)``: two rate
coefficients and an activation-energy ratio. The only measured output is the
product concentration ``x2``.

The numerical kernels are compiled with numba; the public functions wrap them
with input validation and turn failure codes into :class:`DomainError`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import exp, isfinite

import numba as nb
import numpy as np

from .errors import ConfigError, DomainError

W_NOMINAL = (1.0e4, 400.0, 0.55)
U_MIN = 0.049
U_MAX = 0.449
X3_MIN = 1e-6

_COMPONENTS = ("x1", "x2", "x3")


@dataclass(frozen=True)
class ModelConfig:
    """Sampling period, control box and nominal parameters.

    ``substeps`` RK4 steps of length ``dt / substeps`` make up one sampling
    period; a single RK4 step of 0.02 is unstable for the fast reaction
    regimes reached at high temperature.
    """

    dt: float = 0.02
    u_min: float = U_MIN
    u_max: float = U_MAX
    w_nominal: tuple[float, float, float] = field(default=W_NOMINAL)
    substeps: int = 10

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError(f"model.dt must be positive, got {self.dt}")
        if not self.u_min < self.u_max:
            raise ConfigError(f"model.u_min ({self.u_min}) must be < model.u_max ({self.u_max})")
        if self.substeps < 1:
            raise ConfigError(f"model.substeps must be >= 1, got {self.substeps}")
        if len(self.w_nominal) != 3 or min(self.w_nominal) <= 0:
            raise ConfigError(f"model.w_nominal must be 3 positive values, got {self.w_nominal}")
        object.__setattr__(self, "w_nominal", tuple(float(v) for v in self.w_nominal))

    @property
    def h(self) -> float:
        return self.dt / self.substeps


# ---------------------------------------------------------------------------
# compiled kernels
# ---------------------------------------------------------------------------


@nb.njit(cache=True)
def _rhs(a, b, c, u, w1, w2, w3):
    r1 = w1 * a * a * exp(-1.0 / c)
    r2 = w2 * a * exp(-w3 / c)
    return 1.0 - r1 - r2 - a, r1 - b, u - c


@nb.njit(cache=True)
def _rk4(a, b, c, u, w1, w2, w3, h):
    # last return value is False when a stage temperature left the domain
    if c <= X3_MIN:
        return a, b, c, False
    k1a, k1b, k1c = _rhs(a, b, c, u, w1, w2, w3)
    c2 = c + 0.5 * h * k1c
    if c2 <= X3_MIN:
        return a, b, c, False
    k2a, k2b, k2c = _rhs(a + 0.5 * h * k1a, b + 0.5 * h * k1b, c2, u, w1, w2, w3)
    c3 = c + 0.5 * h * k2c
    if c3 <= X3_MIN:
        return a, b, c, False
    k3a, k3b, k3c = _rhs(a + 0.5 * h * k2a, b + 0.5 * h * k2b, c3, u, w1, w2, w3)
    c4 = c + h * k3c
    if c4 <= X3_MIN:
        return a, b, c, False
    k4a, k4b, k4c = _rhs(a + h * k3a, b + h * k3b, c4, u, w1, w2, w3)
    na = a + h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a)
    nb_ = b + h / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b)
    nc = c + h / 6.0 * (k1c + 2.0 * k2c + 2.0 * k3c + k4c)
    ok = np.isfinite(na) and np.isfinite(nb_) and np.isfinite(nc)
    return na, nb_, nc, ok


@nb.njit(cache=True)
def _period(a, b, c, u, w1, w2, w3, h, substeps):
    ok = True
    for _ in range(substeps):
        a, b, c, ok = _rk4(a, b, c, u, w1, w2, w3, h)
        if not ok:
            break
    return a, b, c, ok


@nb.njit(cache=True)
def _simulate_into(x0, u, w, h, substeps, out):
    """Fill ``out`` (N+1, 3); return -1 on success or the failing step index."""
    out[0, 0] = x0[0]
    out[0, 1] = x0[1]
    out[0, 2] = x0[2]
    a, b, c = x0[0], x0[1], x0[2]
    for k in range(u.shape[0]):
        a, b, c, ok = _period(a, b, c, u[k], w[0], w[1], w[2], h, substeps)
        if not ok:
            return k
        out[k + 1, 0] = a
        out[k + 1, 1] = b
        out[k + 1, 2] = c
    return -1


@nb.njit(cache=True)
def _rhs_jac(a, b, c, u, w, f, jac):
    """Right-hand side and its Jacobian w.r.t. (x1, x2, x3, u), shape (3, 4)."""
    e1 = exp(-1.0 / c)
    e2 = exp(-w[2] / c)
    r1 = w[0] * a * a * e1
    r2 = w[1] * a * e2
    f[0] = 1.0 - r1 - r2 - a
    f[1] = r1 - b
    f[2] = u - c
    ic2 = 1.0 / (c * c)
    jac[0, 0] = -2.0 * w[0] * a * e1 - w[1] * e2 - 1.0
    jac[0, 1] = 0.0
    jac[0, 2] = -r1 * ic2 - r2 * w[2] * ic2
    jac[0, 3] = 0.0
    jac[1, 0] = 2.0 * w[0] * a * e1
    jac[1, 1] = -1.0
    jac[1, 2] = r1 * ic2
    jac[1, 3] = 0.0
    jac[2, 0] = 0.0
    jac[2, 1] = 0.0
    jac[2, 2] = -1.0
    jac[2, 3] = 1.0


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def _as_state(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (3,):
        raise ValueError(f"state must have 3 components, got shape {x.shape}")
    return x


def reactor_rhs(x, u: float, w) -> np.ndarray:
    """Time derivative of the reactor state under control ``u``."""
    x = _as_state(x)
    w = np.asarray(w, dtype=float)
    if not x[2] > X3_MIN:
        raise DomainError(f"x3={x[2]!r} must exceed {X3_MIN:g}")
    out = np.array(_rhs(x[0], x[1], x[2], float(u), w[0], w[1], w[2]))
    for name, v in zip(_COMPONENTS, out):
        if not isfinite(v):
            raise DomainError(f"derivative of {name} is not finite at x={x.tolist()}")
    return out


def rk4_step(x, u: float, w, dt: float) -> np.ndarray:
    """One classical RK4 step of length ``dt`` with ``u`` held constant."""
    x = _as_state(x)
    w = np.asarray(w, dtype=float)
    a, b, c, ok = _rk4(x[0], x[1], x[2], float(u), w[0], w[1], w[2], float(dt))
    if not ok:
        raise DomainError(
            f"RK4 step from x={x.tolist()} with u={u} left the model domain "
            f"(x3 <= {X3_MIN:g} at a stage or non-finite result)"
        )
    return np.array([a, b, c])


def step(x, u: float, w, cfg: ModelConfig) -> np.ndarray:
    """Advance one sampling period: ``cfg.substeps`` RK4 steps."""
    x = _as_state(x)
    w = np.asarray(w, dtype=float)
    a, b, c, ok = _period(x[0], x[1], x[2], float(u), w[0], w[1], w[2], cfg.h, cfg.substeps)
    if not ok:
        raise DomainError(f"sampling period from x={x.tolist()} with u={u} left the model domain")
    return np.array([a, b, c])


def check_controls(u_seq, cfg: ModelConfig) -> np.ndarray:
    u = np.ascontiguousarray(u_seq, dtype=float).reshape(-1)
    if u.size and (u.min() < cfg.u_min or u.max() > cfg.u_max):
        bad = int(np.flatnonzero((u < cfg.u_min) | (u > cfg.u_max))[0])
        raise ValueError(f"control u[{bad}]={u[bad]!r} outside [{cfg.u_min}, {cfg.u_max}]")
    return u


def simulate(x0, u_seq, w, cfg: ModelConfig) -> np.ndarray:
    """State trajectory of shape ``(N + 1, 3)``; row 0 is ``x0``."""
    x0 = _as_state(x0)
    u = check_controls(u_seq, cfg)
    w = np.ascontiguousarray(w, dtype=float)
    if not x0[2] > X3_MIN:
        raise DomainError(f"initial x3={x0[2]!r} must exceed {X3_MIN:g}")
    out = np.empty((u.size + 1, 3))
    status = _simulate_into(x0, u, w, cfg.h, cfg.substeps, out)
    if status >= 0:
        raise DomainError(f"simulation failed at step {status} from x={out[status].tolist()}")
    return out


def measure(x) -> float | np.ndarray:
    """Measured output (product concentration) of a state or a trajectory."""
    x = np.asarray(x, dtype=float)
    return x[..., 1] if x.ndim > 1 else float(x[1])
