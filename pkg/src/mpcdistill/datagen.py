"""Learning data from solved open-loop problems.

For each sampled pair ``(x0, w)`` one optimal control problem is solved and
``m`` samples are harvested from its solution by sliding a window of the last
``M + 1`` measurements along the optimal output trajectory: the window ending
at instant ``k`` is paired with the optimal control ``u*_k``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ModelConfig, measure
from .errors import ConfigError, GenerationError, SolverError, DomainError
from .learner import DEFAULT_SCHEME, LabelScheme, quantize_labels
from .ocp import OcpProblem, OcpSolution, SolverOptions, solve_ocp

logger = logging.getLogger(__name__)

X0_BOX = ((1e-4, 0.5), (1e-4, 0.2), (1e-4, 0.25))
MAX_FAILURE_FRACTION = 0.10

# stream tags keep generation, evaluation and solver draws independent
STREAM_SCENARIO = 0
STREAM_EVAL = 1


@dataclass(frozen=True)
class ScenarioSpec:
    x0_box: tuple = X0_BOX
    sigma: tuple[float, float, float] = (0.33, 0.33, 0.33)
    nu_bound: float = 0.8
    seed: int = 0

    def __post_init__(self):
        box = tuple((float(lo), float(hi)) for lo, hi in self.x0_box)
        if len(box) != 3 or any(lo > hi for lo, hi in box):
            raise ConfigError(f"x0_box must hold 3 ordered intervals, got {self.x0_box}")
        if box[2][0] <= 0:
            raise ConfigError("x0_box lower bound on x3 must be positive")
        if len(self.sigma) != 3 or min(self.sigma) <= 0:
            raise ConfigError(f"sigma must be 3 positive values, got {self.sigma}")
        if not 0 < self.nu_bound < 1:
            raise ConfigError(f"nu_bound must lie in (0, 1), got {self.nu_bound}")
        object.__setattr__(self, "x0_box", box)
        object.__setattr__(self, "sigma", tuple(float(s) for s in self.sigma))


def scenario_rng(seed: int, index: int, stream: int = STREAM_SCENARIO) -> np.random.Generator:
    """Independent generator for one scenario, fixed by ``(seed, stream, index)``."""
    return np.random.default_rng([seed, stream, index])


def sample_params(rng: np.random.Generator, spec: ScenarioSpec = ScenarioSpec(),
                  w_nominal=(1e4, 400.0, 0.55)) -> np.ndarray:
    """Relative Gaussian perturbation of the nominal parameters.

    Each relative deviation is redrawn until its magnitude is within
    ``spec.nu_bound``, which keeps every parameter positive.
    """
    w = np.empty(3)
    for i in range(3):
        while True:
            nu = rng.normal(0.0, spec.sigma[i])
            if abs(nu) <= spec.nu_bound:
                break
        w[i] = (1.0 + nu) * w_nominal[i]
    return w


def sample_initial_state(rng: np.random.Generator, spec: ScenarioSpec = ScenarioSpec()) -> np.ndarray:
    lo = np.array([b[0] for b in spec.x0_box])
    hi = np.array([b[1] for b in spec.x0_box])
    return lo + (hi - lo) * rng.random(3)


def draw_scenario(spec: ScenarioSpec, index: int, w_nominal, stream: int = STREAM_SCENARIO):
    rng = scenario_rng(spec.seed, index, stream)
    x0 = sample_initial_state(rng, spec)
    w = sample_params(rng, spec, w_nominal)
    return x0, w


def check_window_budget(N: int, M: int, m: int) -> None:
    if M < 0 or m < 1:
        raise ConfigError(f"need M >= 0 and m >= 1, got M={M}, m={m}")
    if M + m - 1 > N - 1:
        raise ConfigError(
            f"windows ending at k = M..M+m-1 need an optimal control at each end: "
            f"M + m - 1 = {M + m - 1} exceeds N - 1 = {N - 1} (M={M}, m={m}, N={N})"
        )


def extract_windows(solution: OcpSolution, M: int, m: int) -> list[tuple[np.ndarray, float]]:
    """``m`` pairs ``(window, u*_k)`` for ``k = M .. M+m-1``; windows are newest first."""
    N = len(solution.u_star)
    check_window_budget(N, M, m)
    y = measure(solution.trajectory)
    return [(y[k - M:k + 1][::-1].copy(), float(solution.u_star[k])) for k in range(M, M + m)]


@dataclass(frozen=True)
class LabeledSample:
    window: np.ndarray
    u_value: float
    label: int
    q_index: int
    k: int


@dataclass
class Dataset:
    """Samples held column-wise; row order is scenario-major, then ``k`` ascending."""

    windows: np.ndarray
    u_values: np.ndarray
    labels: np.ndarray
    q_index: np.ndarray
    k: np.ndarray
    config: dict = field(default_factory=dict)
    scenarios: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def M(self) -> int:
        return self.windows.shape[1] - 1

    @property
    def samples(self) -> list[LabeledSample]:
        return [
            LabeledSample(self.windows[i], float(self.u_values[i]), int(self.labels[i]),
                          int(self.q_index[i]), int(self.k[i]))
            for i in range(len(self))
        ]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.windows[idx], self.u_values[idx], self.labels[idx],
                       self.q_index[idx], self.k[idx], dict(self.config), self.scenarios)

    def prefix(self, m: int) -> "Dataset":
        """Samples from the first ``m`` windows of every scenario (``k < M + m``)."""
        if m < 1:
            raise ConfigError(f"m must be >= 1, got {m}")
        sub = self.subset(np.flatnonzero(self.k < self.M + m))
        sub.config = {**self.config, "m": min(m, self.config.get("m", m))}
        return sub


def build_dataset(
    spec: ScenarioSpec,
    N: int,
    M: int,
    m: int,
    n_q: int,
    opts: SolverOptions | None = None,
    cfg: ModelConfig | None = None,
    scheme: LabelScheme = DEFAULT_SCHEME,
    *,
    initial_states=None,
    w_fixed=None,
    stream: int = STREAM_SCENARIO,
) -> Dataset:
    """Draw ``n_q`` scenarios, solve each, and harvest ``m`` windows per solution.

    ``initial_states`` replaces the sampled ``x0`` values and ``w_fixed``
    replaces the sampled parameters; both exist for the nominal-design
    baseline, which uses given initial states with the nominal parameters.
    Failed solves are logged and skipped; more than 10% failures is an error.
    """
    cfg = cfg or ModelConfig()
    opts = opts or SolverOptions()
    check_window_budget(N, M, m)
    if n_q < 1:
        raise ConfigError(f"n_q must be >= 1, got {n_q}")
    if initial_states is not None and len(initial_states) != n_q:
        raise ConfigError(f"{len(initial_states)} initial states given for n_q={n_q}")

    windows, u_vals, q_idx, ks, scenarios = [], [], [], [], []
    extract_time = 0.0
    for q in range(n_q):
        x0, w = draw_scenario(spec, q, cfg.w_nominal, stream)
        if initial_states is not None:
            x0 = np.asarray(initial_states[q], dtype=float)
        if w_fixed is not None:
            w = np.asarray(w_fixed, dtype=float)
        record = {"q_index": q, "x0": x0.tolist(), "w": w.tolist()}
        try:
            sol = solve_ocp(OcpProblem(x0, w, N, cfg), opts)
        except (SolverError, DomainError) as exc:
            logger.warning("scenario %d failed: %s", q, exc)
            record.update(ok=False, error=str(exc))
            scenarios.append(record)
            continue
        t0 = time.perf_counter()
        pairs = extract_windows(sol, M, m)
        for j, (win, u) in enumerate(pairs):
            windows.append(win)
            u_vals.append(u)
            q_idx.append(q)
            ks.append(M + j)
        extract_time += time.perf_counter() - t0
        record.update(ok=True, j_star=sol.j_star, converged=sol.converged, iterations=sol.iterations,
                      wall_time=sol.wall_time, start_index=sol.start_index, u_star=sol.u_star.tolist())
        scenarios.append(record)

    failures = sum(not r["ok"] for r in scenarios)
    if failures > MAX_FAILURE_FRACTION * n_q:
        raise GenerationError(f"{failures} of {n_q} scenario solves failed")
    u_arr = np.asarray(u_vals, dtype=float)
    config = {
        "N": N, "M": M, "m": m, "n_q": n_q,
        "seed": spec.seed, "stream": stream,
        "sigma": list(spec.sigma), "nu_bound": spec.nu_bound,
        "x0_box": [list(b) for b in spec.x0_box],
        "w_fixed": None if w_fixed is None else list(map(float, w_fixed)),
        "failures": failures,
        "extraction_time": extract_time,
    }
    return Dataset(
        windows=np.asarray(windows, dtype=float).reshape(-1, M + 1),
        u_values=u_arr,
        labels=quantize_labels(u_arr, scheme),
        q_index=np.asarray(q_idx, dtype=np.int64),
        k=np.asarray(ks, dtype=np.int64),
        config=config,
        scenarios=scenarios,
    )
