"""Run configuration read from INI files.

Example::

    [model]
    diffusion = 1
    mortality = 1 + z
    birth = 2/(1+z)
    boundary = neumann
    max_age = 1

    [discretization]
    n = 64
    M = 200

    [continuation]
    eps_max = 0.5
    steps = 30
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

from .ageprop import SCHEMES
from .model import MODES, WIRINGS, ModelSpec, holling_tanner_setup, make_model


class ConfigError(ValueError):
    pass


COEFFS = ("diffusion", "mortality", "birth", "drift")


@dataclass
class ModelConfig:
    diffusion: str = "1"
    mortality: str = "1"
    birth: str = "2"
    drift: Optional[str] = None
    boundary: str = "neumann"
    robin_weight: Tuple[float, float] = (0.0, 0.0)
    length: float = 1.0
    max_age: float = 1.0
    mode: str = "standard"
    sign: int = 1
    wiring: str = "exponent"
    derivatives: dict = field(default_factory=dict)

    def build(self) -> ModelSpec:
        model = make_model(
            self.diffusion,
            self.mortality,
            self.birth,
            boundary=self.boundary,
            robin_weight=self.robin_weight,
            length=self.length,
            max_age=self.max_age,
            drift=self.drift,
            derivatives=self.derivatives,
        )
        if self.mode == "holling-tanner":
            model = holling_tanner_setup(model, self.sign, self.wiring)
        return model


@dataclass
class DiscretizationConfig:
    n: int = 64
    M: int = 200
    scheme: str = "implicit-euler"


@dataclass
class ContinuationConfig:
    eps_max: float = 0.5
    steps: int = 30
    newton_tol: float = 1e-9
    initial_step: Optional[float] = None
    max_step: Optional[float] = None
    allow_fd: bool = True


@dataclass
class OutputConfig:
    directory: str = "out"
    rq_points: int = 21


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    discretization: DiscretizationConfig = field(default_factory=DiscretizationConfig)
    continuation: ContinuationConfig = field(default_factory=ContinuationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    family: Optional[str] = None

    def __post_init__(self):
        self.check()

    def check(self) -> None:
        d, c, m = self.discretization, self.continuation, self.model
        if d.n < 8 or d.M < 8:
            raise ConfigError(f"grid too coarse: need n >= 8 and M >= 8, got n={d.n}, M={d.M}")
        if d.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {d.scheme!r}")
        if not c.newton_tol > 0:
            raise ConfigError("newton_tol must be positive")
        for name in ("initial_step", "max_step"):
            v = getattr(c, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive")
        if c.eps_max < 0 or c.steps < 0:
            raise ConfigError("eps_max and steps must be nonnegative")
        if m.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {m.mode!r}")
        if m.sign not in (1, -1):
            raise ConfigError("sign must be + or -")
        if m.wiring not in WIRINGS:
            raise ConfigError(f"wiring must be one of {WIRINGS}")
        if self.output.rq_points < 2:
            raise ConfigError("rq_points must be at least 2")

    def with_overrides(self, n=None, M=None, mode=None, sign=None, out=None) -> "RunConfig":
        disc = replace(self.discretization, n=self.discretization.n if n is None else n,
                       M=self.discretization.M if M is None else M)
        model = replace(self.model, mode=self.model.mode if mode is None else mode,
                        sign=self.model.sign if sign is None else sign)
        output = replace(self.output, directory=self.output.directory if out is None else str(out))
        return replace(self, model=model, discretization=disc, output=output)

    def as_dict(self) -> dict:
        return asdict(self)


def _sign(text: str) -> int:
    t = text.strip()
    if t in ("+", "+1", "1"):
        return 1
    if t in ("-", "-1"):
        return -1
    raise ConfigError(f"sign must be + or -, got {text!r}")


def _weights(text: str) -> Tuple[float, float]:
    parts = [p for p in text.replace(",", " ").split() if p]
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"bad robin_weight {text!r}") from exc
    if len(vals) == 1:
        return vals[0], vals[0]
    if len(vals) == 2:
        return vals[0], vals[1]
    raise ConfigError(f"robin_weight takes one or two numbers, got {text!r}")


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    known = {"model", "discretization", "continuation", "output", "validate"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    try:
        mcfg = ModelConfig()
        if cp.has_section("model"):
            s = cp["model"]
            for name in ("diffusion", "mortality", "birth"):
                if name in s:
                    setattr(mcfg, name, s[name])
            mcfg.drift = s.get("drift") or None
            mcfg.boundary = s.get("boundary", mcfg.boundary).strip().lower()
            if "robin_weight" in s:
                mcfg.robin_weight = _weights(s["robin_weight"])
            mcfg.length = s.getfloat("length", mcfg.length)
            mcfg.max_age = s.getfloat("max_age", mcfg.max_age)
            mcfg.mode = s.get("mode", mcfg.mode).strip().lower()
            if "sign" in s:
                mcfg.sign = _sign(s["sign"])
            mcfg.wiring = s.get("wiring", mcfg.wiring).strip().lower()
            mcfg.derivatives = {c: s[f"d_{c}"] for c in COEFFS if f"d_{c}" in s}

        dcfg = DiscretizationConfig()
        if cp.has_section("discretization"):
            s = cp["discretization"]
            dcfg.n = s.getint("n", dcfg.n)
            dcfg.M = s.getint("M", dcfg.M)
            dcfg.scheme = s.get("scheme", dcfg.scheme).strip().lower()

        ccfg = ContinuationConfig()
        if cp.has_section("continuation"):
            s = cp["continuation"]
            ccfg.eps_max = s.getfloat("eps_max", ccfg.eps_max)
            ccfg.steps = s.getint("steps", ccfg.steps)
            ccfg.newton_tol = s.getfloat("newton_tol", ccfg.newton_tol)
            if "initial_step" in s:
                ccfg.initial_step = s.getfloat("initial_step")
            if "max_step" in s:
                ccfg.max_step = s.getfloat("max_step")
            ccfg.allow_fd = s.getboolean("allow_fd", ccfg.allow_fd)

        ocfg = OutputConfig()
        if cp.has_section("output"):
            s = cp["output"]
            ocfg.directory = s.get("directory", ocfg.directory)
            ocfg.rq_points = s.getint("rq_points", ocfg.rq_points)

        family = None
        if cp.has_section("validate"):
            family = cp["validate"].get("family") or None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value: {exc}") from exc

    if family is not None:
        from .families import get_family

        base = get_family(family)
        if not cp.has_section("model"):
            mcfg = base.model
        if not cp.has_section("discretization"):
            dcfg = base.discretization
    return RunConfig(mcfg, dcfg, ccfg, ocfg, family)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
