"""Age march, net-reproduction operator and the critical mortality intensity.

The linearised problem at zero density is marched in age with implicit Euler
(default) or Crank-Nicolson on the diffusion part, while the parameter
dependent zeroth-order factor is integrated exactly::

    Pi_(lam,0)(a_k, 0) = exp(-lam * Hlam(a_k) + G(a_k)) * Pi_0(a_k, 0)

``Hlam`` is the cumulative trapezoid integral of the weight multiplying the
parameter (``mu(0,.)`` in the standard regime) and ``G`` collects the fixed
factors of the Holling-Tanner variant. Quadrature nodes coincide with the
march nodes, so one march serves every term of ``Q_lambda``.
"""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import quad
from scipy.optimize import brentq

from .model import ModelSpec
from .spatial import (
    SpatialGrid,
    assemble,
    bands,
    check_peclet,
    coefficient_arrays,
    laplacian_eigenpair,
    to_sparse,
)

log = logging.getLogger(__name__)

SCHEMES = ("implicit-euler", "crank-nicolson")


class PreconditionError(ValueError):
    """The model violates a hypothesis needed for a positive critical point."""

    def __init__(self, message: str, condition: str):
        self.condition = condition
        super().__init__(message)


class SpectralError(RuntimeError):
    pass


class PositivityError(RuntimeError):
    pass


class PropagationError(RuntimeError):
    pass


class NonCommutingError(ValueError):
    pass


@dataclass(frozen=True)
class AgeMesh:
    max_age: float
    M: int

    @property
    def h(self) -> float:
        return self.max_age / self.M

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.max_age, self.M + 1)

    @cached_property
    def weights(self) -> np.ndarray:
        w = np.full(self.M + 1, self.h)
        w[0] = w[-1] = self.h / 2
        return w

    def cumulative(self, values: np.ndarray) -> np.ndarray:
        """Cumulative trapezoid integral from 0 to each node."""
        values = np.asarray(values, dtype=float)
        out = np.zeros(self.M + 1)
        out[1:] = np.cumsum(0.5 * self.h * (values[1:] + values[:-1]))
        return out

    def index(self, a: float) -> int:
        k = int(round(a / self.h))
        if k < 0 or k > self.M or abs(k * self.h - a) > 1e-9 * max(1.0, self.max_age):
            raise ValueError(f"age {a!r} is not a node of the age mesh (h_a = {self.h:g})")
        return k


class Discretization:
    """A model on a spatial grid and an age mesh, with cached zero-density data."""

    def __init__(self, model: ModelSpec, n: int = 64, M: int = 200, scheme: str = "implicit-euler"):
        if scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        self.model = model
        self.grid = SpatialGrid(model.length, n, model.boundary)
        self.ages = AgeMesh(model.max_age, M)
        self.scheme = scheme
        a = self.ages.nodes
        self.b0 = np.broadcast_to(model.birth(0.0, a), a.shape).astype(float)
        self.mu0 = np.broadcast_to(model.mortality(0.0, a), a.shape).astype(float)
        self.D0 = np.broadcast_to(model.diffusion(0.0, a), a.shape).astype(float)
        self.H = self.ages.cumulative(self.mu0)
        self.Dcum = self.ages.cumulative(self.D0)
        if model.reaction is not None:
            e = model.reaction.pde_sign
            self.lambda_weight = -a.copy()
            self.base_exponent = e * a - self.H
        else:
            self.lambda_weight = model.mortality_sign * self.H
            self.base_exponent = np.zeros_like(a)
        self._factors: dict = {}

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def M(self) -> int:
        return self.ages.M

    @property
    def shape(self):
        return (self.M + 1, self.grid.size)

    def factor(self, lam: float) -> np.ndarray:
        """exp(-lam * Hlam(a_k) + G(a_k)) at every age node."""
        return np.exp(-lam * self.lambda_weight + self.base_exponent)

    @cached_property
    def sigma1(self) -> float:
        return laplacian_eigenpair(self.grid).value

    @cached_property
    def phi1(self) -> np.ndarray:
        return laplacian_eigenpair(self.grid).vector

    # -- zero-density propagator -----------------------------------------------

    def _step_operator(self, k: int):
        op = assemble(self.model, self.grid, None, self.ages.nodes[k])
        return op

    def _solver(self, key, matrix):
        lu = self._factors.get(key)
        if lu is None:
            lu = spla.splu(matrix.tocsc())
            self._factors[key] = lu
        return lu

    @cached_property
    def _steps(self):
        """Per-step (solve, rhs-operator) pairs of the zero-density march."""
        h = self.ages.h
        N = self.grid.size
        I = sp.identity(N, format="csr")
        ops = [self._step_operator(k) for k in range(self.M + 1)]
        steps = []
        for k in range(1, self.M + 1):
            A = ops[k].matrix
            theta = 1.0 if self.scheme == "implicit-euler" else 0.5
            key = (theta, A.data.tobytes())
            lu = self._solver(key, I + theta * h * A)
            rhs = None if theta == 1.0 else (I - (1 - theta) * h * ops[k - 1].matrix)
            steps.append((lu, rhs))
        return steps

    def march(self, phi: np.ndarray, upto: Optional[int] = None) -> np.ndarray:
        """Pi_0(a_k, 0) phi for k = 0..upto, as an array of shape (upto+1, N)."""
        upto = self.M if upto is None else upto
        phi = np.asarray(phi, dtype=float)
        out = np.empty((upto + 1, phi.size))
        out[0] = phi
        v = phi
        for k in range(1, upto + 1):
            lu, rhs = self._steps[k - 1]
            v = lu.solve(v if rhs is None else rhs @ v)
            out[k] = v
        return out


# ------------------------------------------------------------------ operations


def propagate(
    disc: Discretization,
    lam: float,
    phi: np.ndarray,
    a_target: float,
    env_U: Optional[np.ndarray] = None,
    form: str = "direct",
) -> np.ndarray:
    """Solve the linear age march from 0 to ``a_target`` starting at ``phi``.

    ``form="direct"`` marches (I + h_a[A(U, a_k) + m_k]) v_k = v_{k-1} with the
    zeroth-order coefficient m_k frozen at the environment density ``env_U``.
    ``form="factored"`` (zero environment only) returns the exact-factor form
    used by :func:`apply_Q`. The two agree to first order in h_a.
    """
    k_target = disc.ages.index(a_target)
    phi = np.asarray(phi, dtype=float)
    if form == "factored":
        if env_U is not None and np.any(np.asarray(env_U) != 0):
            raise ValueError("the factored form is only available at zero density")
        return disc.factor(lam)[k_target] * disc.march(phi, k_target)[-1]
    if form != "direct":
        raise ValueError("form must be 'direct' or 'factored'")

    model, grid, h = disc.model, disc.grid, disc.ages.h
    U = np.zeros(grid.size) if env_U is None else np.asarray(env_U, dtype=float)
    a = disc.ages.nodes[1 : k_target + 1]
    if k_target == 0:
        return phi.copy()
    D_face, d_node = coefficient_arrays(model, grid, U, a)
    check_peclet(grid, D_face, d_node, a)
    lo, di, up = bands(grid, D_face, d_node)
    mu = np.broadcast_to(model.mortality(U[None, :], a[:, None]), di.shape)
    if model.reaction is not None:
        m = mu - lam - model.reaction.pde_sign
    else:
        m = lam * model.mortality_sign * mu
    di = di + m
    v = phi
    for j in range(k_target):
        diag = 1.0 + h * di[j]
        if np.any(diag <= 0):
            raise PropagationError(
                f"step matrix loses its positive diagonal at age {a[j]:g}; "
                "lam * h_a is too large for the growth regime"
            )
        S = to_sparse(h * lo[j], diag, h * up[j]).tocsc()
        try:
            v = spla.spsolve(S, v)
        except RuntimeError as exc:
            raise PropagationError(f"singular step matrix at age {a[j]:g}") from exc
        if not np.all(np.isfinite(v)):
            raise PropagationError(f"singular step matrix at age {a[j]:g}")
    return v


def apply_Q(disc: Discretization, lam: float, phi: np.ndarray) -> np.ndarray:
    """Net-reproduction operator: sum_k w_k b(0,a_k) exp(...) Pi_0(a_k,0) phi."""
    coeff = disc.ages.weights * disc.b0 * disc.factor(lam)
    if not np.any(coeff):
        return np.zeros_like(np.asarray(phi, dtype=float))
    return coeff @ disc.march(phi)


@dataclass
class SpectralResult:
    lam: float
    radius: float
    vector: np.ndarray
    iterations: int
    residual: float


def spectral_radius(
    disc: Discretization,
    lam: float,
    start: Optional[np.ndarray] = None,
    tol: float = 1e-10,
    res_tol: float = 1e-9,
    maxiter: int = 2000,
) -> SpectralResult:
    """Dominant eigenvalue of Q_lambda and its positive eigenvector by power iteration."""
    if not np.any(disc.b0 > 0):
        raise SpectralError("zero birth kernel: r(Q_lambda) > 0 needs b(0,.) not identically zero")
    W = disc.grid.weights
    strict = disc.scheme == "implicit-euler"
    v = np.ones(disc.grid.size) if start is None else np.array(start, dtype=float)
    v /= np.abs(v).max()
    r_prev = np.inf
    rng = np.random.default_rng(12345)
    for it in range(1, maxiter + 1):
        q = apply_Q(disc, lam, v)
        qmax = np.abs(q).max()
        if qmax == 0.0:
            return SpectralResult(lam, 0.0, v, it, 0.0)
        r = float(v @ (W * q) / (v @ (W * v)))
        res = float(np.abs(q - r * v).max())
        if abs(r - r_prev) < tol * max(1.0, abs(r)) and res <= res_tol * max(1.0, abs(r)):
            break
        r_prev = r
        v = q / qmax
        if v.min() < -1e-12:
            msg = f"power iterate has a negative entry {v.min():.3g} at lam={lam:g}; positivity of the march is broken"
            if strict:
                raise PositivityError(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
        if it == maxiter // 2:
            # stagnation: restart from a perturbed positive vector
            v = np.abs(v) + 0.1 * rng.random(v.size)
            v /= v.max()
            r_prev = np.inf
    else:
        raise SpectralError(f"power iteration did not converge in {maxiter} steps at lam={lam:g}")
    if v.sum() < 0:
        v = -v
    v = v / v.max()
    if v.min() < -1e-12:
        msg = f"eigenvector has a negative entry {v.min():.3g}"
        if strict:
            raise PositivityError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return SpectralResult(float(lam), r, v, it, res)


def ensure_commuting(disc: Discretization):
    model = disc.model
    if model.drift is not None and np.any(model.drift(0.0, disc.ages.nodes) != 0):
        raise NonCommutingError("drift does not vanish at zero density; the zero-density operators do not commute")


def analytic_k(disc: Discretization, lam: float, sigma1: Optional[float] = None) -> float:
    """Closed-form spectral radius for commuting zero-density operators.

    Adaptive quadrature of
    ``b(0,a) exp(-lam Hlam(a) + G(a)) exp(-sigma1 int_0^a D(0,r) dr)`` over the
    continuous age interval, so it carries no age discretisation error.
    ``sigma1`` defaults to the principal eigenvalue of the discrete unit operator.
    """
    ensure_commuting(disc)
    model = disc.model
    s1 = disc.sigma1 if sigma1 is None else float(sigma1)
    a_m = model.max_age

    def cum(fn, a):
        return quad(lambda r: float(fn(0.0, r)), 0.0, a, limit=200, epsabs=1e-14, epsrel=1e-13)[0] if a > 0 else 0.0

    def integrand(a):
        H = cum(model.mortality, a)
        if model.reaction is not None:
            expo = lam * a + model.reaction.pde_sign * a - H
        else:
            expo = -lam * model.mortality_sign * H
        return float(model.birth(0.0, a)) * np.exp(expo - s1 * cum(model.diffusion, a))

    return float(quad(integrand, 0.0, a_m, limit=200, epsabs=1e-13, epsrel=1e-12)[0])


def age_decay(disc: Discretization, sigma: float) -> np.ndarray:
    """Discrete age march of exp(-sigma int_0^a D(0,r) dr) under the chosen scheme."""
    h = disc.ages.h
    D = disc.D0
    out = np.ones(disc.M + 1)
    if disc.scheme == "implicit-euler":
        steps = 1.0 / (1.0 + h * sigma * D[1:])
    else:
        steps = (1.0 - 0.5 * h * sigma * D[:-1]) / (1.0 + 0.5 * h * sigma * D[1:])
    out[1:] = np.cumprod(steps)
    return out


def discrete_k(disc: Discretization, lam: float, sigma1: Optional[float] = None) -> float:
    """Spectral radius of the discrete Q_lambda in the commuting case.

    Exact for the discrete operators: the principal eigenvector of the unit
    operator is propagated by the scalar factors of :func:`age_decay`.
    """
    ensure_commuting(disc)
    s1 = disc.sigma1 if sigma1 is None else float(sigma1)
    return float(disc.ages.weights @ (disc.b0 * disc.factor(lam) * age_decay(disc, s1)))


def solve_discrete_k(disc: Discretization, sigma1: Optional[float] = None) -> float:
    """Root of discrete_k(lam) = 1, bracketed as in :func:`find_lambda0`."""
    f = lambda l: discrete_k(disc, l, sigma1) - 1.0
    lo, hi = 0.0, 1.0
    sgn = 1.0 if disc.model.increasing_mode else -1.0
    while sgn * f(hi) < 0:
        lo, hi = hi, 2 * hi
        if hi > 2.0**40:
            raise SpectralError("no bracket for discrete_k(lambda) = 1")
    return float(brentq(f, lo, hi, xtol=1e-14, rtol=8.9e-16))


def find_lambda0(
    disc: Discretization,
    r_tol: float = 1e-8,
    max_doublings: int = 40,
):
    """Critical intensity lam0 with r(Q_lam0) = 1, and the spectral data there."""
    state = {"start": None}

    def r_of(lam):
        res = spectral_radius(disc, lam, start=state["start"])
        state["start"] = res.vector
        return res

    increasing = disc.model.increasing_mode
    r0 = r_of(0.0)
    if not increasing and not r0.radius > 1:
        raise PreconditionError(
            f"r(Q_0) = {r0.radius:.6g} <= 1: the population does not grow even without mortality, "
            "so no positive critical intensity exists (growth condition r(Q_0) > 1 violated)",
            "growth",
        )
    if increasing and not r0.radius < 1:
        raise PreconditionError(
            f"r(Q_0) = {r0.radius:.6g} >= 1: the growth regime needs r(Q_0) < 1 "
            "(sub-replacement condition k(0) < 1 violated)",
            "sub-replacement",
        )
    floor = disc.ages.weights[0] * disc.b0[0]
    if not increasing and floor >= 1.0:
        raise SpectralError(
            f"age mesh too coarse: the newborn quadrature term h_a/2 * b(0,0) = {floor:.4g} >= 1 "
            "keeps r(Q_lambda) above 1 for every lambda; increase M"
        )
    lo, hi = 0.0, 1.0
    for _ in range(max_doublings + 1):
        r_hi = r_of(hi).radius
        crossed = r_hi > 1 if increasing else r_hi < 1
        if crossed:
            break
        lo, hi = hi, 2 * hi
    else:
        raise SpectralError(f"no bracket for r(Q_lambda) = 1 below lambda = {hi / 2:g}")

    lam0 = brentq(lambda l: r_of(l).radius - 1.0, lo, hi, xtol=1e-14, rtol=8.9e-16, maxiter=200)
    result = spectral_radius(disc, lam0, start=state["start"])
    if abs(result.radius - 1.0) > r_tol:
        raise SpectralError(f"critical point solve stalled: |r - 1| = {abs(result.radius - 1):.3g}")
    log.info("lambda0 = %.10g (r = %.12g, %d power iterations)", lam0, result.radius, result.iterations)
    return float(lam0), result


def rq_curve(disc: Discretization, lambdas: Sequence[float], workers: int = 1):
    """(lambda, r, iterations) rows for the r(Q_lambda) curve."""
    lambdas = [float(l) for l in lambdas]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda l: spectral_radius(disc, l), lambdas))
    else:
        results = [spectral_radius(disc, l) for l in lambdas]
    return [(l, r.radius, r.iterations) for l, r in zip(lambdas, results)]
