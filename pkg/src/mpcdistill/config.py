"""Run configuration: one INI file with a section per pipeline stage.

Lists are comma separated; the initial-state box is three ``lo, hi`` pairs
separated by semicolons. Keys are case sensitive. ``dumps(loads(text))`` is a
fixed point after one round trip.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace

from .datagen import X0_BOX, ScenarioSpec, check_window_budget
from .dynamics import ModelConfig
from .errors import ConfigError
from .learner import ForestConfig, LabelScheme
from .ocp import SolverOptions


@dataclass(frozen=True)
class GenerationConfig:
    N: int = 250
    M: int = 10
    m: int = 200
    n_q: int = 500
    sigma: tuple[float, float, float] = (0.33, 0.33, 0.33)
    nu_bound: float = 0.8
    x0_box: tuple = X0_BOX
    seed: int = 0

    def scenario_spec(self, seed: int | None = None) -> ScenarioSpec:
        """Sampling distributions; ``seed`` replaces the generation seed (evaluation draws)."""
        return ScenarioSpec(self.x0_box, self.sigma, self.nu_bound, self.seed if seed is None else seed)


@dataclass(frozen=True)
class LearnerConfig:
    n_trees: int = 100
    max_leaf_nodes: int = 500
    feature_subset_size: int = 0  # 0: ceil(sqrt(M + 1))
    bootstrap: bool = True
    seed: int = 0
    test_ratio: float = 0.33
    m_variants: tuple[int, ...] = (10, 50, 100, 150, 200)
    thresholds: tuple[float, float] = (0.075, 0.14)
    control_levels: tuple[float, float, float] = (0.049, 0.11, 0.449)

    def forest(self) -> ForestConfig:
        return ForestConfig(self.n_trees, self.max_leaf_nodes, self.feature_subset_size or None,
                            self.bootstrap, self.seed)

    def scheme(self, model: ModelConfig) -> LabelScheme:
        return LabelScheme(self.thresholds, self.control_levels, model.u_min, model.u_max)


@dataclass(frozen=True)
class EvaluationConfig:
    n_eval: int = 100
    seed: int = 1


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    solver: SolverOptions = field(default_factory=SolverOptions)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


_SECTIONS = ("model", "generation", "solver", "learner", "evaluation", "output")
_SKIP = {("solver", "initial_profiles")}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(", ".join(_fmt(v) for v in pair) for pair in value)
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(f"not a boolean: {text!r}")
            return low in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, str):
            return text
        if isinstance(default, tuple):
            if default and isinstance(default[0], tuple):
                return tuple(tuple(float(v) for v in part.split(",")) for part in text.split(";") if part.strip())
            if not text:
                return ()
            items = [v.strip() for v in text.split(",")]
            proto = default[0] if default else ""
            if isinstance(proto, str):
                return tuple(items)
            if isinstance(proto, int) and not isinstance(proto, bool):
                return tuple(int(v) for v in items)
            return tuple(float(v) for v in items)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    raise ConfigError(f"{where}: unsupported setting type")


def _section_values(cfg: RunConfig, name: str) -> dict:
    obj = getattr(cfg, name)
    return {f.name: getattr(obj, f.name) for f in fields(obj) if (name, f.name) not in _SKIP}


def dumps(cfg: RunConfig) -> str:
    lines = []
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        for key, value in _section_values(cfg, name).items():
            lines.append(f"{key} = {_fmt(value)}")
        lines.append("")
    return "\n".join(lines)


def loads(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse INI text; ``overrides`` maps ``section.key`` to raw string values."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    for path, raw in (overrides or {}).items():
        section, _, key = path.partition(".")
        if not key:
            raise ConfigError(f"override {path!r} must look like section.key")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, raw)

    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    base = RunConfig()
    built = {}
    for name in _SECTIONS:
        defaults = _section_values(base, name)
        values = dict(defaults)
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in defaults:
                    raise ConfigError(f"{name}.{key}: unknown setting")
                values[key] = _parse(raw, defaults[key], f"{name}.{key}")
        try:
            built[name] = replace(getattr(base, name), **values)
        except ConfigError as exc:
            raise ConfigError(f"[{name}] {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}] {exc}") from exc
    cfg = RunConfig(**built)
    validate(cfg)
    return cfg


def load(path, overrides: dict[str, str] | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text, overrides)


def dump(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(cfg))


def validate(cfg: RunConfig) -> None:
    """Cross-section checks that individual sections cannot see."""
    g, lr = cfg.generation, cfg.learner
    for key in ("N", "n_q"):
        if getattr(g, key) < 1:
            raise ConfigError(f"generation.{key} must be >= 1")
    try:
        check_window_budget(g.N, g.M, g.m)
        g.scenario_spec()
    except ConfigError as exc:
        raise ConfigError(f"generation: {exc}") from exc
    if not 0 < lr.test_ratio < 1:
        raise ConfigError(f"learner.test_ratio must be in (0, 1), got {lr.test_ratio}")
    bad = [m for m in lr.m_variants if not 1 <= m <= g.m]
    if bad:
        raise ConfigError(f"learner.m_variants {bad} must lie in [1, generation.m={g.m}]")
    try:
        lr.forest()
        lr.scheme(cfg.model)
    except ConfigError as exc:
        raise ConfigError(f"learner: {exc}") from exc
    if cfg.evaluation.n_eval < 1:
        raise ConfigError("evaluation.n_eval must be >= 1")


def to_dict(cfg: RunConfig) -> dict:
    out = {}
    for name in _SECTIONS:
        out[name] = {k: v for k, v in asdict(getattr(cfg, name)).items() if (name, k) not in _SKIP}
    return out
