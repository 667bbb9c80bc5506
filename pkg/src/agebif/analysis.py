"""Checks of the structural hypotheses and of the bifurcation direction.

The functional checks follow the integrated population of each branch point
through the age recurrence. With ``D(U) = D(0)`` depending on age only, the
weight ``psi`` (spatial trapezoid weights, times the principal eigenvector
outside the Neumann case) is a left eigenvector of every frozen operator, so
``z_k = psi . u[k]`` obeys a scalar recursion that can be compared with the
zero-density one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .ageprop import (
    Discretization,
    NonCommutingError,
    age_decay,
    analytic_k,
    apply_Q,
    discrete_k,
    ensure_commuting,
    spectral_radius,
)
from .equilibrium import BifurcationDiagram, BranchPoint
from .model import ModelSpec, holling_tanner_setup

__all__ = [
    "GrowthReport",
    "SubcritEntry",
    "SubcritReport",
    "TransversalityReport",
    "check_growth_condition",
    "check_density_monotonicity",
    "check_diffusion_monotonicity",
    "subcriticality_functional",
    "subcriticality_report",
    "transversality_check",
    "holling_tanner_setup",
]

DEFAULT_Z = (0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 5.0, 10.0)
SLACK_TOL = 1e-6


def _is_commuting(disc: Discretization) -> bool:
    try:
        ensure_commuting(disc)
    except NonCommutingError:
        return False
    return True


@dataclass
class GrowthReport:
    holds: bool
    r0: float
    k0: Optional[float]
    condition: str

    def message(self) -> str:
        rel = ">" if self.condition == "growth" else "<"
        state = "holds" if self.holds else "violated"
        return f"r(Q_0) = {self.r0:.6g}, required r(Q_0) {rel} 1: {self.condition} condition {state}"


def check_growth_condition(disc: Discretization) -> GrowthReport:
    """r(Q_0) against 1: above 1 in the standard regime, below 1 in the growth regime.

    In commuting models the closed-form value k(0) is reported as well.
    """
    r0 = spectral_radius(disc, 0.0).radius
    k0 = analytic_k(disc, 0.0) if _is_commuting(disc) else None
    if disc.model.increasing_mode:
        return GrowthReport(r0 < 1.0, r0, k0, "sub-replacement")
    return GrowthReport(r0 > 1.0, r0, k0, "growth")


def _age_samples(model: ModelSpec, ages):
    return np.linspace(0.0, model.max_age, 33) if ages is None else np.asarray(ages, dtype=float)


def check_density_monotonicity(
    model: ModelSpec, z_samples: Sequence[float] = DEFAULT_Z, ages=None
) -> bool:
    """Density never raises fertility or lowers mortality: b(z,a) <= b(0,a), mu(z,a) >= mu(0,a)."""
    a = _age_samples(model, ages)
    z = np.asarray(z_samples, dtype=float)[:, None]
    b_ok = np.all(model.birth(z, a[None, :]) <= model.birth(0.0 * z, a[None, :]))
    mu_ok = np.all(model.mortality(z, a[None, :]) >= model.mortality(0.0 * z, a[None, :]))
    return bool(b_ok and mu_ok)


def check_diffusion_monotonicity(model: ModelSpec, z_samples: Sequence[float] = DEFAULT_Z, ages=None) -> bool:
    """D(z,a) >= D(0,a) on the samples."""
    a = _age_samples(model, ages)
    z = np.asarray(z_samples, dtype=float)[:, None]
    return bool(np.all(model.diffusion(z, a[None, :]) >= model.diffusion(0.0 * z, a[None, :])))


# ----------------------------------------------------------- subcriticality


@dataclass
class SubcritEntry:
    eps: float
    lam: float
    applicable: bool
    reason: str = ""
    z: Optional[np.ndarray] = field(default=None, repr=False)
    z0: float = 0.0
    birth_bound: float = 0.0
    k: float = float("nan")
    decay_slack: float = 0.0
    birth_slack: float = 0.0
    renewal_slack: float = 0.0
    lambda_slack: float = 0.0

    @property
    def holds(self) -> bool:
        if not self.applicable:
            return False
        return min(self.decay_slack, self.birth_slack, self.renewal_slack, self.lambda_slack) >= -SLACK_TOL

    def as_dict(self) -> dict:
        return {
            "eps": self.eps,
            "lambda": self.lam,
            "applicable": self.applicable,
            "reason": self.reason,
            "z0": self.z0,
            "birth_bound": self.birth_bound,
            "k": self.k,
            "decay_slack": self.decay_slack,
            "birth_slack": self.birth_slack,
            "renewal_slack": self.renewal_slack,
            "lambda_slack": self.lambda_slack,
            "holds": self.holds,
        }


@dataclass
class SubcritReport:
    lambda0: float
    entries: List[SubcritEntry]
    verdict: str

    @property
    def subcritical(self) -> bool:
        return self.verdict == "subcritical"

    def as_dict(self) -> dict:
        return {
            "lambda0": self.lambda0,
            "verdict": self.verdict,
            "points": [e.as_dict() for e in self.entries],
        }


def _applicability(disc: Discretization) -> Optional[str]:
    model = disc.model
    if model.mode != "standard" or model.mortality_sign < 0:
        return "not applicable (growth regime)"
    if model.drift is not None:
        return "not applicable (drift term)"
    if not check_density_monotonicity(model):
        return "not applicable (density raises fertility or lowers mortality on samples)"
    if model.boundary.kind != "neumann":
        if not check_diffusion_monotonicity(model):
            return "not applicable (D(U) >= D(0) fails on samples)"
        if model.diffusion.depends_on("z"):
            return "not applicable (x-local diffusion)"
    return None


def _weight(disc: Discretization) -> np.ndarray:
    if disc.model.boundary.kind == "neumann":
        return disc.grid.weights
    return disc.grid.weights * disc.phi1


def subcriticality_functional(disc: Discretization, point: BranchPoint, lam0: float) -> SubcritEntry:
    """Integrated-population inequalities at one nonnegative branch point.

    Verifies ``z_k <= z_0 exp(-lam H_k) delta_k`` where ``delta_k`` is the discrete
    age decay of the principal mode (1 for Neumann), the birth bound
    ``z_0 <= sum_k w_k b(0,a_k) z_k`` and the renewal bound ``k(lam) >= 1``.
    Slacks are scaled by ``z_0`` and must exceed ``-1e-6``.
    """
    reason = _applicability(disc)
    if reason is not None:
        return SubcritEntry(point.eps, point.lam, False, reason)
    if disc.scheme != "implicit-euler":
        return SubcritEntry(point.eps, point.lam, False, "not applicable (equilibria use implicit Euler)")
    u = point.u.u
    if u.min() < -1e-8 * max(np.abs(u).max(), 1e-300):
        return SubcritEntry(point.eps, point.lam, False, "not applicable (negative density)")

    lam = point.lam
    sigma = 0.0 if disc.model.boundary.kind == "neumann" else disc.sigma1
    z = u @ _weight(disc)
    z0 = float(z[0])
    decay = disc.factor(lam) * age_decay(disc, sigma)
    bound = z0 * decay
    birth_bound = float(disc.ages.weights @ (disc.b0 * z))
    k = discrete_k(disc, lam, sigma)
    scale = max(abs(z0), np.abs(z).max(), 1e-300)
    if z0 == 0 and not np.any(z):
        decay_slack = birth_slack = 0.0
    else:
        decay_slack = float(np.min((bound - z)[1:]) / scale) if z.size > 1 else 0.0
        birth_slack = float((birth_bound - z0) / scale)
    renewal_slack = k - 1.0 if z0 > 0 else 0.0
    lambda_slack = (lam0 - lam) if z0 > 0 else 0.0
    return SubcritEntry(
        point.eps, lam, True, "", z, z0, birth_bound, k,
        decay_slack, birth_slack, renewal_slack, lambda_slack,
    )


def subcriticality_report(disc: Discretization, diagram: BifurcationDiagram) -> SubcritReport:
    """Functional check at every accepted positive branch point and an overall verdict."""
    entries = [subcriticality_functional(disc, p, diagram.lambda0) for p in diagram.positive()]
    if not entries:
        verdict = "n/a"
    elif not all(e.applicable for e in entries):
        verdict = "not applicable"
    elif all(e.holds for e in entries):
        verdict = "subcritical"
    else:
        verdict = "inconclusive"
    return SubcritReport(diagram.lambda0, entries, verdict)


# ------------------------------------------------------------ transversality


@dataclass
class TransversalityReport:
    z: np.ndarray = field(repr=False)
    defect: float
    norm: float
    lam0: float

    @property
    def nonvanishing(self) -> bool:
        return self.norm > 0

    def as_dict(self) -> dict:
        return {"defect": self.defect, "norm_z": self.norm, "lambda0": self.lam0}


def transversality_check(disc: Discretization, lam0: float, B: np.ndarray) -> TransversalityReport:
    """z = sum_k w_k b(0,a_k) H(a_k) Pi_(lam0,0)(a_k,0) B and its defect |Q z - z| / |z|.

    ``H`` is the cumulative integral of the parameter weight. Refuses models whose
    zero-density operators do not commute, and models whose weight vanishes near
    age zero.
    """
    ensure_commuting(disc)
    if not np.any(disc.lambda_weight[1:3] != 0):
        raise ValueError("the parameter weight vanishes near age 0, so z = 0 and transversality fails")
    march = disc.march(np.asarray(B, dtype=float))
    coeff = disc.ages.weights * disc.b0 * disc.lambda_weight * disc.factor(lam0)
    z = coeff @ march
    norm = float(np.abs(z).max())
    if norm == 0:
        return TransversalityReport(z, float("inf"), 0.0, float(lam0))
    Qz = apply_Q(disc, lam0, z)
    defect = float(np.abs(Qz - z).max() / norm)
    return TransversalityReport(z, defect, norm, float(lam0))
