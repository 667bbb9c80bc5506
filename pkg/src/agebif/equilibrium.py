"""Nonlinear equilibria, their Jacobian and continuation of the bifurcating branch.

Unknowns are the densities ``u[k, j]`` at age nodes ``k = 0..M`` and active
spatial nodes ``j``; ``U = sum_k w_k u[k]`` is the total local population. The
age recurrence treats diffusion (and the Holling-Tanner remainder) implicitly
and integrates the local linear rate exactly over each step::

    (I + h_a A(U, a_k)) u[k] - E_k(lam, U) * u[k-1] [+ h_a e u[k]^2/(1+u[k])] = 0
    u[0] - sum_k w_k b(U, a_k) * u[k] = 0

with ``E_k = exp(c_k)`` and, in the standard regime,
``c_k = -lam * sign * h_a * (mu(U,a_{k-1}) + mu(U,a_k)) / 2``. At ``u = 0``
this reproduces the factored propagator of :mod:`agebif.ageprop` exactly, so
the discrete linearisation is singular at the computed critical point.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .ageprop import Discretization, PositivityError
from .spatial import (
    bands,
    check_peclet,
    coefficient_arrays,
    density_derivative,
    tridiag_matvec,
)

log = logging.getLogger(__name__)


@dataclass
class DensityField:
    """Density on the age x space grid; the total population is derived on access."""

    u: np.ndarray
    age_weights: np.ndarray = field(repr=False)
    space_weights: np.ndarray = field(repr=False)

    @classmethod
    def zeros(cls, disc: Discretization) -> "DensityField":
        return cls(np.zeros(disc.shape), disc.ages.weights, disc.grid.weights)

    @classmethod
    def of(cls, disc: Discretization, u) -> "DensityField":
        return cls(np.asarray(u, dtype=float).reshape(disc.shape), disc.ages.weights, disc.grid.weights)

    @property
    def U(self) -> np.ndarray:
        return self.age_weights @ self.u

    def inner(self, other) -> float:
        other = other.u if isinstance(other, DensityField) else other
        return float(np.einsum("k,j,kj,kj->", self.age_weights, self.space_weights, self.u, other))

    def l2_norm(self) -> float:
        return float(np.sqrt(max(self.inner(self.u), 0.0)))

    def sup_norm(self) -> float:
        return float(np.abs(self.u).max())

    def min_entry(self) -> float:
        return float(self.u.min())


class SingularJacobianError(RuntimeError):
    pass


class MissingDerivativeError(ValueError):
    pass


def require_derivatives(model) -> None:
    """Raise unless every density-dependent coefficient carries an analytic z-derivative."""
    names = ["diffusion", "mortality", "birth"] + (["drift"] if model.drift is not None else [])
    missing = [n for n in names if getattr(model, n).depends_on("z") and getattr(model, n).uses_fd]
    if missing:
        raise MissingDerivativeError(
            "finite-difference fallback disabled and no analytic z-derivative for: " + ", ".join(missing)
        )


# ------------------------------------------------------------------- residual


def _pieces(disc: Discretization, lam: float, u: np.ndarray, jacobian: bool = False):
    model, grid = disc.model, disc.grid
    h = disc.ages.h
    w = disc.ages.weights
    a = disc.ages.nodes
    u = np.asarray(u, dtype=float).reshape(disc.shape)
    U = w @ u

    D_face, d_node = coefficient_arrays(model, grid, U, a)
    check_peclet(grid, D_face, d_node, a)
    lo, di, up = bands(grid, D_face, d_node)
    Au = tridiag_matvec(lo, di, up, u)
    mu = np.broadcast_to(model.mortality(U[None, :], a[:, None]), disc.shape)
    b = np.broadcast_to(model.birth(U[None, :], a[:, None]), disc.shape)
    mu_avg = 0.5 * (mu[:-1] + mu[1:])

    reaction = model.reaction
    if reaction is not None:
        e = reaction.pde_sign
        c = (lam + e) * h - h * mu_avg
        dc_dlam = np.full_like(c, h)
        dc_scale = -h  # dc/dmu_avg
    else:
        s = model.mortality_sign
        c = -lam * s * h * mu_avg
        dc_dlam = -s * h * mu_avg
        dc_scale = -lam * s * h
    E = np.exp(c)

    R = np.empty(disc.shape)
    R[1:] = u[1:] + h * Au[1:] - E * u[:-1]
    if reaction is not None:
        uk = u[1:]
        R[1:] += h * e * uk * uk / (1.0 + uk)
    R[0] = u[0] - np.einsum("k,kj,kj->j", w, b, u)
    out = {"R": R, "u": u, "U": U}
    if not jacobian:
        return out

    # local blocks (U held fixed)
    react_diag = 0.0
    if reaction is not None:
        uk = u[1:]
        react_diag = h * e * (2 * uk + uk * uk) / (1.0 + uk) ** 2
    out["diag_bands"] = (h * lo[1:], 1.0 + h * di[1:] + react_diag, h * up[1:])
    out["sub_diag"] = -E
    out["birth_diag"] = w[:, None] * b  # block (0, m) = delta_m0 I - diag(w_m b_m)

    # dependence on U
    Dz_face = np.broadcast_to(model.diffusion.dz(grid.face_density(U)[None, :], a[:, None]), D_face.shape)
    dz_node = None
    if model.drift is not None:
        dz_node = np.broadcast_to(model.drift.dz(U[None, :], a[:, None]), disc.shape)
    gl, gd, gu = density_derivative(grid, Dz_face[1:], None if dz_node is None else dz_node[1:], u[1:])
    mu_z = np.broadcast_to(model.mortality.dz(U[None, :], a[:, None]), disc.shape)
    b_z = np.broadcast_to(model.birth.dz(U[None, :], a[:, None]), disc.shape)
    dc_dU = dc_scale * 0.5 * (mu_z[:-1] + mu_z[1:])
    gd = h * gd - E * u[:-1] * dc_dU
    out["G_bands"] = (h * gl, gd, h * gu)
    out["G_birth"] = -np.einsum("k,kj,kj->j", w, b_z, u)
    F_lam = np.zeros(disc.shape)
    F_lam[1:] = -E * u[:-1] * dc_dlam
    out["F_lam"] = F_lam
    return out


def residual(disc: Discretization, lam: float, u) -> np.ndarray:
    """Stacked equilibrium residual, birth rows first then the age recurrence."""
    u = u.u if isinstance(u, DensityField) else u
    return _pieces(disc, lam, u)["R"].ravel()


def _tri_coo(lower, diag, upper, row_off, col_off):
    """COO triplets of stacked tridiagonal blocks with the full structural pattern."""
    nb, N = diag.shape
    j = np.arange(N)
    rows, cols, vals = [], [], []
    for band, shift in ((lower, -1), (diag, 0), (upper, 1)):
        jj = j[(j + shift >= 0) & (j + shift < N)]
        r = row_off[:, None] + jj[None, :]
        c = col_off[:, None] + jj[None, :] + shift
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(band[:, jj].ravel())
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def _local_and_coupling(disc: Discretization, p):
    M, N = disc.M, disc.grid.size
    size = (M + 1) * N
    k = np.arange(1, M + 1)
    rows, cols, vals = [], [], []
    r, c, v = _tri_coo(*p["diag_bands"], k * N, k * N)
    rows.append(r), cols.append(c), vals.append(v)
    jj = np.arange(N)
    rows.append((k[:, None] * N + jj).ravel())
    cols.append(((k[:, None] - 1) * N + jj).ravel())
    vals.append(p["sub_diag"].ravel())
    m = np.arange(M + 1)
    rows.append(np.tile(jj, M + 1))
    cols.append((m[:, None] * N + jj).ravel())
    bd = -p["birth_diag"].copy()
    bd[0] += 1.0
    vals.append(bd.ravel())
    J_loc = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    ).tocsr()

    r, c, v = _tri_coo(*p["G_bands"], k * N, np.zeros(M, dtype=int))
    r = np.concatenate([r, jj])
    c = np.concatenate([c, jj])
    v = np.concatenate([v, p["G_birth"]])
    G = sp.coo_matrix((v, (r, c)), shape=(size, N)).tocsr()
    return J_loc, G


def jacobian(disc: Discretization, lam: float, u, allow_fd: bool = True) -> sp.csr_matrix:
    """Exact derivative of :func:`residual` with respect to the stacked density.

    Includes the nonlocal columns through ``U``: block ``(k, m)`` carries
    ``w_m dR_k/dU``. The returned matrix keeps the full structural pattern.
    """
    if not allow_fd:
        require_derivatives(disc.model)
    u = u.u if isinstance(u, DensityField) else u
    p = _pieces(disc, lam, u, jacobian=True)
    J_loc, _ = _local_and_coupling(disc, p)
    M, N = disc.M, disc.grid.size
    w = disc.ages.weights
    k = np.arange(1, M + 1)
    rows, cols, vals = [], [], []
    gl, gd, gu = p["G_bands"]
    for m in range(M + 1):
        r, c, v = _tri_coo(w[m] * gl, w[m] * gd, w[m] * gu, k * N, np.full(M, m * N))
        rows.append(r), cols.append(c), vals.append(v)
    jj = np.arange(N)
    m = np.arange(M + 1)
    rows.append(np.tile(jj, M + 1))
    cols.append((m[:, None] * N + jj).ravel())
    vals.append((w[:, None] * p["G_birth"][None, :]).ravel())
    size = (M + 1) * N
    coupling = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    )
    J = (J_loc.tocoo(), coupling)
    full = sp.coo_matrix(
        (np.concatenate([J[0].data, J[1].data]), (np.concatenate([J[0].row, J[1].row]), np.concatenate([J[0].col, J[1].col]))),
        shape=(size, size),
    ).tocsr()
    full.sum_duplicates()
    return full


def parameter_derivative(disc: Discretization, lam: float, u) -> np.ndarray:
    u = u.u if isinstance(u, DensityField) else u
    return _pieces(disc, lam, u, jacobian=True)["F_lam"].ravel()


def structural_nnz(disc: Discretization) -> int:
    """Stored entries of :func:`jacobian`: diagonal birth blocks plus tridiagonal coupling blocks."""
    M, N = disc.M, disc.grid.size
    return (M + 1) * N + M * (M + 1) * (3 * N - 2)


# -------------------------------------------------------------------- tangent


def tangent_at_critical(disc: Discretization, lam0: float, B: np.ndarray, normalize: bool = True) -> DensityField:
    """Kernel direction Pi_(lam0,0)(a_k, 0) B of the linearisation at (lam0, 0)."""
    B = np.asarray(B, dtype=float)
    T = disc.factor(lam0)[:, None] * disc.march(B)
    if T.min() < -1e-14 * np.abs(T).max():
        raise PositivityError(f"tangent lost positivity (min entry {T.min():.3g})")
    field_ = DensityField.of(disc, T)
    if normalize:
        field_ = DensityField.of(disc, T / field_.l2_norm())
    return field_


def linearization_spectrum(disc: Discretization, lam0: float, T: DensityField, count: int = 2):
    """Smallest singular values of the linearisation at (lam0, 0) and kernel alignment.

    Recurrence rows are divided by h_a so the operator approximates
    ``d/da + A + lam h`` and its small singular values do not scale with the mesh.
    Returns ``(singular_values, angle)`` with the angle in radians between the
    singular vector of the smallest value and ``T``.
    """
    J = jacobian(disc, lam0, np.zeros(disc.shape)).toarray()
    N = disc.grid.size
    J[N:] /= disc.ages.h
    _, s, Vt = la.svd(J)
    order = np.argsort(s)
    v = Vt[order[0]]
    t = T.u.ravel()
    t = t / np.linalg.norm(t)
    v = v / np.linalg.norm(v)
    c = v @ t
    angle = float(np.arctan2(np.linalg.norm(v - c * t), abs(c)))
    return s[order[:count]], angle


# --------------------------------------------------------------- continuation


@dataclass
class BranchPoint:
    eps: float
    lam: float
    u: DensityField = field(repr=False)
    residual_norm: float
    min_entry: float
    newton_iters: int = 0
    physical: bool = True

    @property
    def l2_norm(self) -> float:
        return self.u.l2_norm()

    @property
    def sup_norm(self) -> float:
        return self.u.sup_norm()


@dataclass
class BifurcationDiagram:
    lambda0: float
    tangent: DensityField = field(repr=False)
    points: List[BranchPoint]
    metadata: dict = field(default_factory=dict)
    terminations: dict = field(default_factory=dict)
    verdict: str = "n/a"

    def positive(self) -> List[BranchPoint]:
        return [p for p in self.points if p.eps > 0]

    def negative(self) -> List[BranchPoint]:
        return [p for p in self.points if p.eps < 0]


@dataclass
class _NewtonResult:
    u: np.ndarray
    lam: float
    norm: float
    iters: int
    converged: bool
    message: str = ""


def _bordered_matrix(disc, p, phase_row):
    J_loc, G = _local_and_coupling(disc, p)
    N = disc.grid.size
    w = disc.ages.weights
    S = sp.kron(w[None, :], sp.identity(N), format="csr")
    F = sp.csr_matrix(p["F_lam"].reshape(-1, 1))
    return sp.bmat(
        [
            [J_loc, G, F],
            [-S, sp.identity(N), None],
            [sp.csr_matrix(phase_row[None, :]), None, None],
        ],
        format="csc",
    )


def newton_corrector(disc, eps, u0, lam0, phase_row, tol=1e-9, maxiter=12) -> _NewtonResult:
    """Newton on F(lam, u) = 0, <T, u> = eps using one bordered sparse factorisation per step."""
    u = np.array(u0, dtype=float).ravel()
    lam = float(lam0)
    N = disc.grid.size
    first = None
    for it in range(maxiter + 1):
        p = _pieces(disc, lam, u, jacobian=True)
        R = p["R"].ravel()
        g = phase_row @ u - eps
        norm = max(float(np.abs(R).max()), abs(g))
        if not np.isfinite(norm):
            return _NewtonResult(u, lam, norm, it, False, "non-finite residual")
        if norm <= tol:
            return _NewtonResult(u, lam, norm, it, True)
        if first is None:
            first = norm
        elif norm > 1e3 * first:
            return _NewtonResult(u, lam, norm, it, False, "diverging")
        if it == maxiter:
            break
        K = _bordered_matrix(disc, p, phase_row)
        rhs = np.concatenate([-R, np.zeros(N), [-g]])
        try:
            dx = spla.splu(K).solve(rhs)
        except RuntimeError as exc:
            raise SingularJacobianError(str(exc)) from exc
        if not np.all(np.isfinite(dx)):
            raise SingularJacobianError("non-finite Newton update")
        u = u + dx[: u.size]
        lam = lam + dx[-1]
    return _NewtonResult(u, lam, norm, maxiter, False, "iteration cap")


def continue_branch(
    disc: Discretization,
    lam0: float,
    T: DensityField,
    eps_max: float,
    steps: int,
    newton_tol: float = 1e-9,
    initial_step: Optional[float] = None,
    max_step: Optional[float] = None,
    min_step: Optional[float] = None,
    easy_iters: int = 3,
    allow_fd: bool = True,
) -> BifurcationDiagram:
    """Trace the branch through (lam0, 0) on both sides, parametrised by eps = <T, u>.

    Secant predictor, Newton corrector on the bordered system. The step halves
    when the corrector fails and doubles after two consecutive easy successes.
    """
    if disc.scheme != "implicit-euler":
        raise ValueError("equilibria are discretised with implicit Euler in age; continue on an implicit-euler Discretization")
    if not allow_fd:
        require_derivatives(disc.model)
    a_m = disc.model.max_age
    initial_step = 1e-2 * a_m if initial_step is None else initial_step
    max_step = max(initial_step, eps_max / 10) if max_step is None else max_step
    min_step = initial_step / 2**10 if min_step is None else min_step
    phase_row = (disc.ages.weights[:, None] * disc.grid.weights[None, :] * T.u).ravel()

    zero = DensityField.zeros(disc)
    origin = BranchPoint(0.0, float(lam0), zero, 0.0, 0.0, 0, True)
    points = [origin]
    terminations = {}
    for direction in (1, -1):
        if eps_max <= 0 or steps <= 0:
            terminations[direction] = "eps_max reached" if eps_max <= 0 else "step budget"
            continue
        hist = [(0.0, np.zeros(T.u.size), float(lam0))]
        step = initial_step
        easy = 0
        accepted = 0
        reason = "step budget"
        while accepted < steps:
            eps_prev = hist[-1][0]
            if abs(eps_prev) >= eps_max * (1 - 1e-12):
                reason = "eps_max reached"
                break
            eps = direction * min(abs(eps_prev) + step, eps_max)
            if len(hist) >= 2:
                (e1, u1, l1), (e2, u2, l2) = hist[-2], hist[-1]
                t = (eps - e2) / (e2 - e1)
                u_pred = u2 + t * (u2 - u1)
                lam_pred = l2 + t * (l2 - l1)
            else:
                u_pred = eps * T.u.ravel()
                lam_pred = float(lam0)
            try:
                res = newton_corrector(disc, eps, u_pred, lam_pred, phase_row, tol=newton_tol)
            except SingularJacobianError as exc:
                reason = f"singular Jacobian near eps={eps:.6g} (possible secondary bifurcation): {exc}"
                break
            except (ArithmeticError, ValueError) as exc:
                res = _NewtonResult(u_pred, lam_pred, np.inf, 0, False, str(exc))
            if not res.converged:
                step /= 2
                easy = 0
                if step < min_step:
                    reason = f"corrector failed at minimum step near eps={eps:.6g}: {res.message}"
                    break
                continue
            field_ = DensityField.of(disc, res.u)
            umin = field_.min_entry()
            physical = umin >= -1e-8 * max(field_.sup_norm(), 1e-300)
            points.append(BranchPoint(eps, res.lam, field_, res.norm, umin, res.iters, physical))
            hist.append((eps, res.u, res.lam))
            accepted += 1
            easy = easy + 1 if res.iters <= easy_iters else 0
            if easy >= 2:
                step = min(2 * step, max_step)
                easy = 0
        terminations[direction] = reason
        log.info("branch direction %+d: %d points (%s)", direction, accepted, reason)

    points.sort(key=lambda p: p.eps)
    meta = {
        "n": disc.n,
        "M": disc.M,
        "scheme": disc.scheme,
        "newton_tol": newton_tol,
        "eps_max": eps_max,
        "steps": steps,
        "initial_step": initial_step,
        "max_step": max_step,
        "model_hash": disc.model.hash(),
    }
    return BifurcationDiagram(float(lam0), T, points, meta, {"+": terminations.get(1), "-": terminations.get(-1)})
