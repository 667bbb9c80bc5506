"""Finite-difference realisation of ``-d/dx(D(U,a) dw/dx) + d(U,a) dw/dx`` on [0, L].

Nodes are uniform, ``x_i = i*h`` for ``i = 0..n``. Dirichlet problems keep the
interior nodes only; Neumann and Robin problems keep all nodes and eliminate a
ghost node at each end. Diffusivities live on the ``n`` faces between nodes
and are evaluated at the arithmetic mean of the neighbouring densities.

Tridiagonal operators are stored as three arrays ``(lower, diag, upper)`` of
the active size ``N``: ``lower[i]`` multiplies ``w[i-1]`` and ``upper[i]``
multiplies ``w[i+1]`` in row ``i``. Leading axes broadcast, which lets the age
march assemble every age at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .expr import CoefficientEvaluationError
from .model import BoundarySpec, ModelSpec


class PecletError(ValueError):
    """Drift too strong for the mesh: the stencil would lose its M-matrix sign pattern."""


class EigenSolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SpatialGrid:
    length: float
    n: int
    boundary: BoundarySpec = field(default_factory=BoundarySpec)

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least two cells")

    @property
    def h(self) -> float:
        return self.length / self.n

    @cached_property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.length, self.n + 1)

    @cached_property
    def active(self) -> np.ndarray:
        if self.boundary.kind == "dirichlet":
            return np.arange(1, self.n)
        return np.arange(self.n + 1)

    @property
    def size(self) -> int:
        return self.active.size

    @property
    def x_active(self) -> np.ndarray:
        return self.x[self.active]

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoid weights on the active nodes (boundary values are zero for Dirichlet)."""
        w = np.full(self.size, self.h)
        if self.boundary.kind != "dirichlet":
            w[0] = w[-1] = self.h / 2
        return w

    def to_global(self, w: np.ndarray) -> np.ndarray:
        """Pad active values with the Dirichlet zeros (no-op otherwise)."""
        if self.boundary.kind != "dirichlet":
            return w
        pad = [(0, 0)] * (w.ndim - 1) + [(1, 1)]
        return np.pad(w, pad)

    def face_density(self, U: np.ndarray) -> np.ndarray:
        Ug = self.to_global(np.asarray(U, dtype=float))
        return 0.5 * (Ug[..., :-1] + Ug[..., 1:])


@dataclass
class DiscreteOperator:
    """Assembled operator at a fixed age and frozen density."""

    matrix: sp.csr_matrix
    age: float
    density: np.ndarray
    grid: SpatialGrid
    bands: tuple = field(repr=False, default=())

    def __matmul__(self, w):
        return self.matrix @ w

    def norm(self) -> float:
        return float(abs(self.matrix).sum(axis=1).max())


def _evaluate(fn, z, a, what):
    try:
        return fn(z, a)
    except CoefficientEvaluationError as exc:
        z_b, a_b = np.broadcast_arrays(np.asarray(z, float), np.asarray(a, float))
        for idx in np.ndindex(z_b.shape):
            try:
                fn(z_b[idx], a_b[idx])
            except CoefficientEvaluationError:
                raise CoefficientEvaluationError(
                    f"{what} failed at density {z_b[idx]:g}, age {a_b[idx]:g} (index {idx}): {exc}"
                ) from exc
        raise


def bands(grid: SpatialGrid, D_face: np.ndarray, d_node: Optional[np.ndarray] = None):
    """Tridiagonal bands from face diffusivities ``(..., n)`` and node drift ``(..., N)``."""
    h = grid.h
    D_face = np.asarray(D_face, dtype=float)
    lead = D_face.shape[:-1]
    N = grid.size
    lower = np.zeros(lead + (N,))
    diag = np.zeros(lead + (N,))
    upper = np.zeros(lead + (N,))
    nuL, nuR = grid.boundary.weights
    if grid.boundary.kind == "dirichlet":
        left, right = D_face[..., :-1], D_face[..., 1:]
        diag[...] = (left + right) / h**2
        lower[..., 1:] = -left[..., 1:] / h**2
        upper[..., :-1] = -right[..., :-1] / h**2
    else:
        left, right = D_face[..., :-1], D_face[..., 1:]
        diag[..., 1:-1] = (left + right) / h**2
        lower[..., 1:-1] = -left / h**2
        upper[..., 1:-1] = -right / h**2
        diag[..., 0] = 2 * D_face[..., 0] * (1 + h * nuL) / h**2
        upper[..., 0] = -2 * D_face[..., 0] / h**2
        diag[..., -1] = 2 * D_face[..., -1] * (1 + h * nuR) / h**2
        lower[..., -1] = -2 * D_face[..., -1] / h**2
    if d_node is not None:
        d_node = np.broadcast_to(np.asarray(d_node, dtype=float), lead + (N,))
        c = d_node / (2 * h)
        if grid.boundary.kind == "dirichlet":
            lower[..., 1:] -= c[..., 1:]
            upper[..., :-1] += c[..., :-1]
        else:
            lower[..., 1:-1] -= c[..., 1:-1]
            upper[..., 1:-1] += c[..., 1:-1]
            diag[..., 0] += d_node[..., 0] * nuL
            diag[..., -1] -= d_node[..., -1] * nuR
    return lower, diag, upper


def check_peclet(grid: SpatialGrid, D_face, d_node, ages=None):
    """Raise :class:`PecletError` unless ``|d| h / (2 D) < 1`` in every drift row."""
    if d_node is None:
        return
    D_face = np.asarray(D_face, dtype=float)
    d_node = np.broadcast_to(np.asarray(d_node, dtype=float), D_face.shape[:-1] + (grid.size,))
    Dmin = np.minimum(D_face[..., :-1], D_face[..., 1:])
    if grid.boundary.kind == "dirichlet":
        dd = d_node
    else:
        dd = d_node[..., 1:-1]
    ratio = np.abs(dd) * grid.h / (2 * Dmin)
    if np.any(~(ratio < 1)):
        idx = np.unravel_index(np.nanargmax(np.where(np.isnan(ratio), np.inf, ratio)), ratio.shape)
        age = ""
        if ages is not None and len(idx) > 1:
            age = f", age {np.asarray(ages).ravel()[idx[0]]:g}"
        raise PecletError(
            f"mesh Peclet number |d| h/(2D) = {ratio[idx]:.3g} >= 1 at row {idx[-1]}{age}; "
            "refine the spatial grid or weaken the drift"
        )


def coefficient_arrays(model: ModelSpec, grid: SpatialGrid, U, ages):
    """Face diffusivities and node drifts for density ``U`` at each age in ``ages``.

    Returns arrays with a leading age axis when ``ages`` is one-dimensional.
    """
    U = np.asarray(U, dtype=float)
    ages = np.asarray(ages, dtype=float)
    a_col = ages[..., None]
    Uf = grid.face_density(U)
    D_face = _evaluate(model.diffusion, Uf, a_col, "diffusion")
    d_node = None
    if model.drift is not None:
        d_node = _evaluate(model.drift, U, a_col, "drift")
    return D_face, d_node


def to_sparse(lower, diag, upper) -> sp.csr_matrix:
    N = diag.shape[-1]
    return sp.diags([lower[1:], diag, upper[:-1]], [-1, 0, 1], shape=(N, N), format="csr")


def tridiag_matvec(lower, diag, upper, w):
    out = diag * w
    out[..., 1:] += lower[..., 1:] * w[..., :-1]
    out[..., :-1] += upper[..., :-1] * w[..., 1:]
    return out


def assemble(model: ModelSpec, grid: SpatialGrid, U=None, a: float = 0.0) -> DiscreteOperator:
    """Assemble the elliptic operator at age ``a`` with the density ``U`` frozen."""
    U = np.zeros(grid.size) if U is None else np.asarray(U, dtype=float)
    D_face, d_node = coefficient_arrays(model, grid, U, a)
    check_peclet(grid, D_face, d_node)
    lo, di, up = bands(grid, D_face, d_node)
    return DiscreteOperator(to_sparse(lo, di, up), float(a), U, grid, (lo, di, up))


def unit_operator(grid: SpatialGrid) -> DiscreteOperator:
    """Discrete ``-d^2/dx^2`` with the grid's boundary conditions."""
    lo, di, up = bands(grid, np.ones(grid.n))
    return DiscreteOperator(to_sparse(lo, di, up), 0.0, np.zeros(grid.size), grid, (lo, di, up))


def density_derivative(grid: SpatialGrid, Dz_face, dz_node, w):
    """Bands of ``d/dU [A(U) w]`` given z-derivatives of the coefficients.

    ``Dz_face`` are derivatives of D at the face densities, ``dz_node`` those of
    the drift at the nodes (or None). Leading axes broadcast as in :func:`bands`.
    """
    h = grid.h
    Dz_face = np.asarray(Dz_face, dtype=float)
    w = np.asarray(w, dtype=float)
    lead = np.broadcast_shapes(Dz_face.shape[:-1], w.shape[:-1])
    N = grid.size
    wg = grid.to_global(w)
    g = wg[..., 1:] - wg[..., :-1]  # face differences, shape (..., n)
    nuL, nuR = grid.boundary.weights
    # sensitivity of row i to the diffusivity on its left/right face
    cL = np.zeros(lead + (N,))
    cR = np.zeros(lead + (N,))
    if grid.boundary.kind == "dirichlet":
        cL[...] = g[..., :-1] / h**2
        cR[...] = -g[..., 1:] / h**2
        DzL = Dz_face[..., :-1]
        DzR = Dz_face[..., 1:]
    else:
        cL[..., 1:-1] = g[..., :-1] / h**2
        cR[..., 1:-1] = -g[..., 1:] / h**2
        cR[..., 0] = 2 * (-g[..., 0] + h * nuL * w[..., 0]) / h**2
        cL[..., -1] = 2 * (g[..., -1] + h * nuR * w[..., -1]) / h**2
        zero = np.zeros(Dz_face.shape[:-1] + (1,))
        DzL = np.concatenate([zero, Dz_face], axis=-1)
        DzR = np.concatenate([Dz_face, zero], axis=-1)
    left = 0.5 * cL * DzL
    right = 0.5 * cR * DzR
    diag = left + right
    lower = np.zeros(lead + (N,))
    upper = np.zeros(lead + (N,))
    lower[..., 1:] = left[..., 1:]
    upper[..., :-1] = right[..., :-1]
    if dz_node is not None:
        diag = diag + np.asarray(dz_node) * central_difference(grid, w)
    return lower, diag, upper


def central_difference(grid: SpatialGrid, w):
    """The drift stencil applied to ``w``, boundary conditions included."""
    h = grid.h
    wg = grid.to_global(np.asarray(w, dtype=float))
    out = np.zeros(wg.shape)
    out[..., 1:-1] = (wg[..., 2:] - wg[..., :-2]) / (2 * h)
    if grid.boundary.kind == "dirichlet":
        return out[..., 1:-1]
    nuL, nuR = grid.boundary.weights
    out[..., 0] = nuL * wg[..., 0]
    out[..., -1] = -nuR * wg[..., -1]
    return out


# ---------------------------------------------------------------------- eigenpair


@dataclass
class EigenPair:
    value: float
    vector: np.ndarray
    iterations: int
    residual: float


def principal_eigenpair(op: DiscreteOperator, tol: float = 1e-10, maxiter: int = 500) -> EigenPair:
    """Smallest eigenvalue and positive eigenvector by shifted inverse iteration.

    The operator is self-adjoint in the trapezoid inner product of its grid, so
    the weighted Rayleigh quotient gives the eigenvalue estimate.
    """
    A = op.matrix.tocsc()
    N = A.shape[0]
    W = op.grid.weights
    scale = op.norm()
    if N == 1:
        val = float(A[0, 0])
        return EigenPair(val, np.ones(1), 0, 0.0)
    shift = -max(1.0, 1e-3 * scale) if scale > 0 else -1.0
    lu = spla.splu((A - shift * sp.identity(N, format="csc")).tocsc())
    v = np.ones(N)
    sigma = np.inf
    for it in range(1, maxiter + 1):
        v = lu.solve(v)
        v /= np.abs(v).max()
        Av = A @ v
        sigma = float(v @ (W * Av) / (v @ (W * v)))
        res = float(np.abs(Av - sigma * v).max())
        if res <= tol * scale:
            break
    else:
        raise EigenSolverError(f"inverse iteration did not converge in {maxiter} steps (residual {res:.3g})")
    if v.sum() < 0:
        v = -v
    v /= v.max()
    if v.min() < -1e-12:
        raise EigenSolverError(
            f"principal eigenvector has a negative entry {v.min():.3g}; the assembly is not diffusion-like"
        )
    v = np.maximum(v, 0.0)
    if abs(sigma) <= 1e3 * np.finfo(float).eps * max(scale, 1.0):
        sigma = 0.0  # rounding residue of an exact null space
    return EigenPair(sigma, v, it, res)


def laplacian_eigenpair(grid: SpatialGrid) -> EigenPair:
    """First eigenpair of the unit-diffusion operator on ``grid``."""
    return principal_eigenpair(unit_operator(grid))
