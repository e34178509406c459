"""Experiment configuration: TOML or JSON in, validated dataclasses out.

Optional fields left unset fall back to the defaults of the chosen problem.
Unknown keys are rejected at every level. ``dumps(parse(text))`` gives a
canonical TOML form, so parse/serialize round-trips compare equal.
"""
from __future__ import annotations

import dataclasses
import inspect
import json
import math
import sys
import typing
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .errors import ConfigError
from .pde_solvers import NewtonConfig
from .problems import PROBLEMS, make_problem
from .prox_opt import OptimizerConfig, RegularizerSpec
from .random_inputs import Distributions


@dataclass(frozen=True)
class RegularizerSection:
    kind: str | None = None  # None keeps the problem default
    radius: float | None = None
    lo: float | None = None
    hi: float | None = None


@dataclass(frozen=True)
class DistributionSection:
    kappa: tuple[float, float] | None = None
    kappa_per_quadrant: bool | None = None
    g: tuple[float, float] | None = None
    sigma: tuple[float, float] | None = None
    r: tuple[float, float] | None = None
    b_scale: tuple[float, float] | None = None


@dataclass(frozen=True)
class ModelSection:
    support: str = "finite_atoms"
    n_atoms: int = 5
    atom_seed: int = 0
    weights: tuple[float, ...] | None = None


@dataclass(frozen=True)
class OptimizerSection:
    step0: float = 1.0
    backtrack: float = 0.5
    sufficient_decrease: float = 1e-4
    fixpoint_tol: float = 1e-8
    max_iter: int = 10_000
    min_step: float = 2.0**-30


@dataclass(frozen=True)
class NewtonSection:
    residual_tol: float = 1e-10
    max_iter: int = 50
    backtrack: float = 0.5
    min_step: float = 2.0**-20


@dataclass(frozen=True)
class GradcheckSection:
    points: int = 3
    directions: int = 10
    step: float = 1e-5
    tol: float = 1e-5
    radius: float = 1.0


@dataclass(frozen=True)
class BoundsSection:
    cases: int = 1000
    tol: float = 1e-9
    kappa_min_bound: float | None = None  # override the constant used in the estimates


@dataclass(frozen=True)
class AppendixSection:
    eps: float | None = None  # None means eps_max
    samples: int = 100
    n: int = 50


@dataclass(frozen=True)
class ConsistencySection:
    ratio: float = 1.0 / 3.0


@dataclass(frozen=True)
class SolveSection:
    n: int = 100


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    n: int | None = None
    alpha: float | None = None
    rho: float = 1.0
    u0: str = "zero"
    seed: int = 0
    seeds: tuple[int, ...] = tuple(range(20))
    n_list: tuple[int, ...] = (10, 100, 1000)
    out: str = "out"
    threads: int = 1
    regularizer: RegularizerSection = field(default_factory=RegularizerSection)
    distributions: DistributionSection = field(default_factory=DistributionSection)
    model: ModelSection = field(default_factory=ModelSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    newton: NewtonSection = field(default_factory=NewtonSection)
    gradcheck: GradcheckSection = field(default_factory=GradcheckSection)
    bounds: BoundsSection = field(default_factory=BoundsSection)
    appendix: AppendixSection = field(default_factory=AppendixSection)
    consistency: ConsistencySection = field(default_factory=ConsistencySection)
    solve: SolveSection = field(default_factory=SolveSection)

    # ---- derived objects ----------------------------------------------------
    def problem_defaults(self) -> dict:
        params = inspect.signature(PROBLEMS[self.problem]).parameters
        return {k: v.default for k, v in params.items()}

    def distributions_obj(self) -> Distributions:
        base = self.problem_defaults()["dists"]
        over = {k: v for k, v in dataclasses.asdict(self.distributions).items() if v is not None}
        return dataclasses.replace(base, **over)

    def regularizer_spec(self) -> RegularizerSpec:
        r = self.regularizer
        if r.kind is None:
            return self.problem_defaults()["psi"]
        return RegularizerSpec(r.kind, radius=r.radius, lo=r.lo, hi=r.hi)

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(**dataclasses.asdict(self.optimizer))

    def newton_config(self) -> NewtonConfig:
        return NewtonConfig(**dataclasses.asdict(self.newton))

    def build_problem(self):
        kw = {"psi": self.regularizer_spec(), "dists": self.distributions_obj(),
              "newton": self.newton_config()}
        if self.n is not None:
            kw["n"] = self.n
        if self.alpha is not None:
            kw["alpha"] = self.alpha
        return make_problem(self.problem, **kw)

    def build_model(self, problem):
        m = self.model
        return problem.make_model(m.support, m.n_atoms, m.atom_seed, m.weights)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return validate(dataclasses.replace(self, **kw))


# --------------------------------------------------------------------------
def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in dataclasses.fields(obj):
            v = _to_plain(getattr(obj, f.name))
            if v is not None:
                out[f.name] = v
        return out
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)]
        if value is None:
            return None
        return _coerce(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a table")
        return _from_dict(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected an array")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} entries")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported type {tp!r}")


def _from_dict(cls, data: dict, path=""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = path or "top level"
        raise ConfigError(f"unknown key(s) at {where}: {', '.join(unknown)}")
    kw = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check every constraint that can be checked without solving anything."""
    _require(cfg.problem in PROBLEMS, f"unknown problem {cfg.problem!r}; choose from {sorted(PROBLEMS)}")
    _require(cfg.n is None or cfg.n >= 2, "n must be at least 2")
    _require(cfg.alpha is None or (math.isfinite(cfg.alpha) and cfg.alpha > 0), "alpha must be positive")
    _require(math.isfinite(cfg.rho) and cfg.rho > 0, "rho must be positive")
    _require(cfg.u0 == "zero", "u0 must be 'zero' (the projection of 0 onto the feasible set)")
    _require(cfg.threads >= 1, "threads must be at least 1")
    _require(len(cfg.seeds) >= 1, "seeds must not be empty")
    _require(len(cfg.n_list) >= 1 and all(n >= 1 for n in cfg.n_list), "n_list entries must be positive")
    _require(all(b > a for a, b in zip(cfg.n_list, cfg.n_list[1:])), "n_list must be strictly increasing")
    m = cfg.model
    _require(m.support in ("finite_atoms", "continuous"), "model.support must be finite_atoms or continuous")
    _require(m.n_atoms >= 1, "model.n_atoms must be at least 1")
    if m.weights is not None:
        _require(len(m.weights) == m.n_atoms, "model.weights needs one entry per atom")
        _require(all(w >= 0 for w in m.weights) and abs(sum(m.weights) - 1) <= 1e-12,
                 "model.weights must be nonnegative and sum to one")
    r = cfg.regularizer
    _require(r.kind in (None, "zero", "ball", "box"), "regularizer.kind must be zero, ball or box")
    g = cfg.gradcheck
    _require(g.points >= 1 and g.directions >= 1, "gradcheck needs at least one point and direction")
    _require(g.step > 0 and g.tol > 0 and g.radius >= 0, "gradcheck step, tol and radius must be positive")
    b = cfg.bounds
    _require(b.cases >= 1 and b.tol >= 0, "bounds.cases must be positive and bounds.tol nonnegative")
    _require(b.kappa_min_bound is None or b.kappa_min_bound > 0, "bounds.kappa_min_bound must be positive")
    a = cfg.appendix
    _require(a.eps is None or a.eps > 0, "appendix.eps must be positive")
    _require(a.samples >= 1 and a.n >= 1, "appendix.samples and appendix.n must be positive")
    _require(0 < cfg.consistency.ratio <= 1, "consistency.ratio must lie in (0, 1]")
    _require(cfg.solve.n >= 1, "solve.n must be positive")
    try:
        cfg.distributions_obj()
        cfg.regularizer_spec()
        cfg.optimizer_config()
        cfg.newton_config()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def from_dict(data: dict) -> ExperimentConfig:
    if "problem" not in data:
        raise ConfigError("missing required key: problem")
    return validate(_from_dict(ExperimentConfig, data))


def parse(text: str, fmt: str = "toml") -> ExperimentConfig:
    try:
        data = json.loads(text) if fmt == "json" else tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {fmt} config: {exc}") from None
    return from_dict(data)


def load(path) -> ExperimentConfig:
    path = str(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from None
    return parse(text, "json" if path.endswith(".json") else "toml")


def dumps(cfg: ExperimentConfig) -> str:
    """Canonical TOML text."""
    return tomli_w.dumps(cfg.to_dict())
