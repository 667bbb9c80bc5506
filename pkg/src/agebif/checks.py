"""Invariant suites run by ``agebif validate``."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .ageprop import (
    Discretization,
    NonCommutingError,
    PropagationError,
    analytic_k,
    ensure_commuting,
    find_lambda0,
    propagate,
    spectral_radius,
)
from .analysis import transversality_check
from .equilibrium import linearization_spectrum, tangent_at_critical
from .model import ModelSpec
from .spatial import PecletError

KERNEL_GRIDS = ((16, 40), (32, 80))


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<20s} {self.detail}"


def _commuting(disc) -> bool:
    try:
        ensure_commuting(disc)
        return True
    except NonCommutingError:
        return False


def exact_sigma1(model: ModelSpec) -> Optional[float]:
    """Principal eigenvalue of -d^2/dx^2 when it has a closed form."""
    if model.boundary.kind == "neumann":
        return 0.0
    if model.boundary.kind == "dirichlet":
        return (np.pi / model.length) ** 2
    return None


def oracle_tolerance(disc: Discretization) -> float:
    """5e-3 plus C (h_a + h_x^2) with C scaled by the stiffness of the principal mode."""
    C = 1.0 + disc.sigma1 * float(np.max(disc.D0))
    return 5e-3 + C * (disc.ages.h + disc.grid.h**2)


def check_oracle(disc: Discretization, lam0: float) -> CheckResult:
    if not _commuting(disc):
        return CheckResult("oracle-equivalence", True, "skipped (non-commuting model)")
    s1 = exact_sigma1(disc.model)
    tol = oracle_tolerance(disc)
    worst = 0.0
    for lam in np.linspace(0.0, 2 * lam0, 5):
        r = spectral_radius(disc, lam).radius
        k = analytic_k(disc, lam, s1)
        worst = max(worst, abs(r - k) / k)
    return CheckResult("oracle-equivalence", worst <= tol, f"max rel err {worst:.3e} (tol {tol:.3e})")


def check_monotonicity(disc: Discretization, lam0: float, samples: int = 10) -> CheckResult:
    lams = np.linspace(0.0, 2 * lam0, samples)
    r = np.array([spectral_radius(disc, l).radius for l in lams])
    diffs = np.diff(r)
    increasing = disc.model.increasing_mode
    margin = float(diffs.min() if increasing else (-diffs).min())
    word = "increasing" if increasing else "decreasing"
    return CheckResult("monotonicity", margin > 1e-6, f"strictly {word}, min margin {margin:.3e}")


def check_positivity(disc: Discretization, lam0: float, trials: int = 100, seed: int = 2024) -> CheckResult:
    """Random nonnegative data and environments through the direct propagator."""
    rng = np.random.default_rng(seed)
    N = disc.grid.size
    worst = np.inf
    try:
        for _ in range(trials):
            phi = rng.random(N) * (rng.random(N) < 0.7)
            env = rng.random(N)
            v = propagate(disc, lam0, phi, disc.model.max_age, env_U=env)
            worst = min(worst, float(v.min()))
    except PecletError as exc:
        return CheckResult("positivity", False, f"Peclet guard: {exc}")
    except PropagationError as exc:
        return CheckResult("positivity", False, str(exc))
    return CheckResult("positivity", worst >= -1e-12, f"{trials} trials, min entry {worst:.3e}")


def check_kernel(model: ModelSpec, grids=KERNEL_GRIDS) -> CheckResult:
    """Smallest singular values of the linearisation on two nested small grids."""
    s2s, worst_ratio, worst_angle = [], 0.0, 0.0
    for n, M in grids:
        d = Discretization(model, n, M)
        lam0, res = find_lambda0(d)
        T = tangent_at_critical(d, lam0, res.vector)
        s, angle = linearization_spectrum(d, lam0, T)
        worst_ratio = max(worst_ratio, s[0] / s[1])
        worst_angle = max(worst_angle, angle)
        s2s.append(s[1])
    stable = 0.5 <= s2s[-1] / s2s[0] <= 2.0
    ok = worst_ratio <= 1e-4 and worst_angle <= 1e-3 and stable
    return CheckResult(
        "kernel-dimension",
        ok,
        f"s1/s2 <= {worst_ratio:.2e}, s2 = {', '.join(f'{v:.4f}' for v in s2s)}, angle {worst_angle:.2e}",
    )


def check_transversality(disc: Discretization, lam0: float, B) -> CheckResult:
    if not _commuting(disc):
        return CheckResult("transversality", True, "skipped (non-commuting model)")
    rep = transversality_check(disc, lam0, B)
    ok = rep.norm > 0 and rep.defect <= 1e-3
    return CheckResult("transversality", ok, f"defect {rep.defect:.3e}, |z| {rep.norm:.3e}")


def run_suite(disc: Discretization) -> List[CheckResult]:
    results: List[CheckResult] = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        lam0, res = find_lambda0(disc)
        steps: List[Callable[[], CheckResult]] = [
            lambda: check_oracle(disc, lam0),
            lambda: check_monotonicity(disc, lam0),
            lambda: check_positivity(disc, lam0),
            lambda: check_kernel(disc.model),
            lambda: check_transversality(disc, lam0, res.vector),
        ]
        for step in steps:
            results.append(step())
    return results
