"""Problem definition: coefficients, boundary conditions and regime flags."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .expr import CoefficientEvaluationError, CoefficientFn, parse_coefficient

BOUNDARY_KINDS = ("dirichlet", "neumann", "robin")
MODES = ("standard", "holling-tanner")
WIRINGS = ("exponent", "balance")


@dataclass(frozen=True)
class BoundarySpec:
    """Boundary operator on both ends of the interval.

    ``robin_weight`` is the coefficient in ``dw/dn + weight * w = 0`` and may be
    a scalar (both ends) or a ``(left, right)`` pair. It is ignored unless
    ``kind == "robin"``.
    """

    kind: str = "neumann"
    robin_weight: Union[float, Tuple[float, float]] = 0.0

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in BOUNDARY_KINDS:
            raise ValueError(f"boundary kind must be one of {BOUNDARY_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        left, right = self.weights
        if left < 0 or right < 0:
            raise ValueError("Robin weight must be nonnegative")

    @property
    def weights(self) -> Tuple[float, float]:
        if self.kind != "robin":
            return 0.0, 0.0
        w = self.robin_weight
        if np.ndim(w) == 0:
            return float(w), float(w)
        left, right = w
        return float(left), float(right)

    @property
    def delta(self) -> int:
        """1 for Dirichlet, 0 for Neumann-type conditions."""
        return 1 if self.kind == "dirichlet" else 0


@dataclass(frozen=True)
class ReactionSpec:
    """Saturating reaction ``+-u/(1+u)`` of the Holling-Tanner variant.

    ``sign`` selects the upper (+1) or lower (-1) choice. With ``wiring="exponent"``
    the sign labels the exponent ``exp((lam -+ 1) a)`` of the reproduction
    factor, so the balance law carries ``-sign * u/(1+u)``. With
    ``wiring="balance"`` the sign is the one in front of ``u/(1+u)`` in the
    balance law and the exponent follows by linearisation.
    """

    sign: int = 1
    wiring: str = "exponent"

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValueError("reaction sign must be +1 or -1")
        if self.wiring not in WIRINGS:
            raise ValueError(f"wiring must be one of {WIRINGS}")

    @property
    def pde_sign(self) -> int:
        """Coefficient of ``u/(1+u)`` in the balance law."""
        return -self.sign if self.wiring == "exponent" else self.sign


@dataclass(frozen=True)
class ModelSpec:
    diffusion: CoefficientFn
    mortality: CoefficientFn
    birth: CoefficientFn
    boundary: BoundarySpec = field(default_factory=BoundarySpec)
    length: float = 1.0
    max_age: float = 1.0
    drift: Optional[CoefficientFn] = None
    mortality_sign: int = 1
    reaction: Optional[ReactionSpec] = None

    def __post_init__(self):
        if not np.isfinite(self.max_age) or self.max_age <= 0:
            raise ValueError("max_age must be finite and positive")
        if self.length <= 0:
            raise ValueError("length must be positive")
        if self.mortality_sign not in (1, -1):
            raise ValueError("mortality_sign must be +1 or -1")
        if self.reaction is not None and self.mortality_sign != -1:
            raise ValueError("the Holling-Tanner reaction requires mortality_sign = -1")

    @property
    def mode(self) -> str:
        return "holling-tanner" if self.reaction is not None else "standard"

    @property
    def increasing_mode(self) -> bool:
        """True when r(Q_lambda) increases with lambda (negative weight h)."""
        return self.mortality_sign < 0

    def hash(self) -> str:
        parts = [
            self.diffusion.text, self.mortality.text, self.birth.text,
            self.drift.text if self.drift is not None else "",
            self.boundary.kind, repr(self.boundary.weights),
            repr(float(self.length)), repr(float(self.max_age)),
            str(self.mortality_sign),
            "" if self.reaction is None else f"{self.reaction.sign}:{self.reaction.wiring}",
        ]
        return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]

    def describe(self) -> dict:
        return {
            "diffusion": self.diffusion.text,
            "drift": None if self.drift is None else self.drift.text,
            "mortality": self.mortality.text,
            "birth": self.birth.text,
            "boundary": self.boundary.kind,
            "robin_weight": list(self.boundary.weights),
            "length": float(self.length),
            "max_age": float(self.max_age),
            "mode": self.mode,
            "mortality_sign": self.mortality_sign,
            "reaction_sign": None if self.reaction is None else self.reaction.sign,
            "reaction_wiring": None if self.reaction is None else self.reaction.wiring,
        }


def _coef(value, derivative=None) -> CoefficientFn:
    if isinstance(value, CoefficientFn):
        return value if derivative is None else value.with_derivative(derivative)
    if not isinstance(value, str):
        value = repr(float(value))
    return parse_coefficient(value, derivative)


def make_model(
    diffusion="1",
    mortality="1",
    birth="2",
    *,
    boundary: Union[str, BoundarySpec] = "neumann",
    robin_weight=0.0,
    length: float = 1.0,
    max_age: float = 1.0,
    drift=None,
    mortality_sign: int = 1,
    derivatives: Optional[dict] = None,
) -> ModelSpec:
    """Convenience constructor taking coefficient strings (or numbers)."""
    derivatives = derivatives or {}
    if isinstance(boundary, str):
        boundary = BoundarySpec(boundary, robin_weight)
    return ModelSpec(
        diffusion=_coef(diffusion, derivatives.get("diffusion")),
        mortality=_coef(mortality, derivatives.get("mortality")),
        birth=_coef(birth, derivatives.get("birth")),
        boundary=boundary,
        length=length,
        max_age=max_age,
        drift=None if drift is None else _coef(drift, derivatives.get("drift")),
        mortality_sign=mortality_sign,
    )


def holling_tanner_setup(model: ModelSpec, sign: int = 1, wiring: str = "exponent") -> ModelSpec:
    """Switch a model to the Holling-Tanner variant.

    The parameter then multiplies ``+u`` (growth), mortality enters with unit
    intensity, and the critical point requires ``r(Q_0) < 1``.
    """
    return replace(model, mortality_sign=-1, reaction=ReactionSpec(sign, wiring))


# -------------------------------------------------------------------- validation


@dataclass(frozen=True)
class Violation:
    invariant: str
    z: Optional[float]
    a: Optional[float]
    value: Optional[float] = None

    def __str__(self):
        where = []
        if self.z is not None:
            where.append(f"z={self.z:g}")
        if self.a is not None:
            where.append(f"a={self.a:g}")
        loc = f" at {', '.join(where)}" if where else ""
        val = f" (value {self.value:g})" if self.value is not None else ""
        return f"{self.invariant}{loc}{val}"


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def invariants(self) -> set:
        return {v.invariant for v in self.violations}

    def __str__(self):
        if self.passed:
            return "all model invariants hold on the sample set"
        return "\n".join(str(v) for v in self.violations)


def _sample(fn, Z, A):
    try:
        return fn(Z, A), None
    except CoefficientEvaluationError as exc:
        return np.full(np.broadcast(Z, A).shape, np.nan), str(exc)


def _first(mask, Z, A, values):
    idx = np.argwhere(mask)[0]
    return float(Z[tuple(idx)]), float(A[tuple(idx)]), float(values[tuple(idx)])


def validate(
    model: ModelSpec,
    sample_density: Sequence[float] = (0.0, 0.5, 1.0, 2.0, 5.0),
    ages: Optional[Sequence[float]] = None,
    age_nodes: int = 65,
) -> ValidationReport:
    """Check the model invariants on a sample set of densities and ages.

    Checks are sampling based. ``ages`` defaults to a uniform grid over
    ``[0, max_age]`` fixed by the model, so adding density samples can only add
    violations.
    """
    z = np.unique(np.concatenate([[0.0], np.asarray(sample_density, dtype=float)]))
    a = np.linspace(0.0, model.max_age, age_nodes) if ages is None else np.asarray(ages, dtype=float)
    Z, A = np.meshgrid(z, a, indexing="ij")
    report = ValidationReport()
    add = report.violations.append

    for name in ("diffusion", "mortality", "birth", "drift"):
        fn = getattr(model, name)
        if fn is not None and _sample(fn, Z, A)[1] is not None:
            add(Violation(f"{name} evaluates on all samples: {_sample(fn, Z, A)[1]}", None, None))

    D = _sample(model.diffusion, Z, A)[0]
    bad = ~(D > 0)
    if bad.any():
        add(Violation("diffusion D(z,a) >= d0 > 0", *_first(bad, Z, A, D)))

    mu = _sample(model.mortality, Z, A)[0]
    bad = ~(mu >= 0)
    if bad.any():
        add(Violation("mortality mu(z,a) >= 0", *_first(bad, Z, A, mu)))

    b = _sample(model.birth, Z, A)[0]
    bad = ~(b >= 0)
    if bad.any():
        add(Violation("birth b(z,a) >= 0", *_first(bad, Z, A, b)))
    if not np.any(_sample(model.birth, 0.0 * a, a)[0] > 0):
        add(Violation("b(0,.) not identically zero", 0.0, None))

    if model.drift is not None:
        d0 = _sample(model.drift, 0.0 * a, a)[0]
        bad = ~(d0 == 0)
        if bad.any():
            k = int(np.argmax(bad))
            add(Violation("drift d(0,a) = 0", 0.0, float(a[k]), float(d0[k])))

    if model.mode == "standard" and model.mortality_sign > 0:
        # h = mu(0,.) must be positive on an initial age interval
        near = a[: min(2, a.size)]
        m0 = _sample(model.mortality, 0.0 * near, near)[0]
        if not np.all(m0 > 0):
            k = int(np.argmin(m0 > 0))
            add(Violation("mu(0,a) > 0 for a near 0", 0.0, float(near[k]), float(m0[k])))
    return report
