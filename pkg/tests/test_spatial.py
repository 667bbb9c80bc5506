import numpy as np
import pytest
import scipy.linalg as la

from agebif.model import BoundarySpec, make_model
from agebif.spatial import (
    PecletError,
    SpatialGrid,
    assemble,
    bands,
    density_derivative,
    laplacian_eigenpair,
    principal_eigenpair,
    tridiag_matvec,
    unit_operator,
)


def grid(kind="neumann", n=4, L=1.0, weight=0.0):
    return SpatialGrid(L, n, BoundarySpec(kind, weight))


def test_neumann_stencil_by_hand():
    g = grid("neumann", 4)
    A = unit_operator(g).matrix.toarray() * g.h**2
    expected = np.array(
        [
            [2, -2, 0, 0, 0],
            [-1, 2, -1, 0, 0],
            [0, -1, 2, -1, 0],
            [0, 0, -1, 2, -1],
            [0, 0, 0, -2, 2],
        ],
        dtype=float,
    )
    np.testing.assert_allclose(A, expected, atol=1e-12)


def test_dirichlet_stencil_by_hand():
    g = grid("dirichlet", 4)
    assert g.size == 3
    A = unit_operator(g).matrix.toarray() * g.h**2
    np.testing.assert_allclose(A, [[2, -1, 0], [-1, 2, -1], [0, -1, 2]], atol=1e-12)


def test_robin_boundary_rows():
    g = grid("robin", 4, weight=(0.5, 2.0))
    A = unit_operator(g).matrix.toarray() * g.h**2
    assert A[0, 0] == pytest.approx(2 * (1 + g.h * 0.5))
    assert A[-1, -1] == pytest.approx(2 * (1 + g.h * 2.0))
    assert A[0, 1] == pytest.approx(-2)


def test_variable_diffusion_face_average():
    g = grid("dirichlet", 4)
    model = make_model("1 + z")
    U = np.array([1.0, 2.0, 3.0])
    A = assemble(model, g, U).matrix.toarray() * g.h**2
    # faces carry D at the mean of neighbouring nodes, with zero boundary values
    D = 1 + np.array([0.5, 1.5, 2.5, 1.5])
    assert A[1, 0] == pytest.approx(-D[1])
    assert A[1, 1] == pytest.approx(D[1] + D[2])
    assert A[0, 0] == pytest.approx(D[0] + D[1])


@pytest.mark.parametrize("kind", ["neumann", "robin", "dirichlet"])
def test_weighted_symmetry_and_m_matrix(kind, rng):
    g = grid(kind, 12, weight=(0.7, 1.3))
    U = rng.random(g.size)
    A = assemble(make_model("1 + z + a"), g, U, a=0.4).matrix.toarray()
    WA = np.diag(g.weights) @ A
    np.testing.assert_allclose(WA, WA.T, atol=1e-10)
    off = A - np.diag(np.diag(A))
    assert np.all(off <= 0)
    assert np.all(A.sum(axis=1) >= -1e-9)


def test_drift_stencil_and_peclet_guard():
    g = grid("neumann", 10)
    weak = make_model("1", drift="0.5*z")
    assemble(weak, g, np.ones(g.size))
    strong = make_model("0.01", drift="20*z")
    with pytest.raises(PecletError, match="Peclet"):
        assemble(strong, g, np.ones(g.size))
    # at zero density the drift vanishes, so the guard is silent
    assemble(strong, g, np.zeros(g.size))


def test_tridiag_matvec_matches_sparse(rng):
    g = grid("robin", 9, weight=1.0)
    op = assemble(make_model("1 + z"), g, rng.random(g.size))
    w = rng.random((3, g.size))
    lo, di, up = op.bands
    np.testing.assert_allclose(tridiag_matvec(lo, di, up, w), (op.matrix @ w.T).T, rtol=1e-13)


@pytest.mark.parametrize("kind", ["neumann", "robin", "dirichlet"])
@pytest.mark.parametrize("drift", [None, "0.3*z"])
def test_density_derivative_fd(kind, drift, rng):
    g = grid(kind, 10, weight=0.8)
    model = make_model("1 + z^2", drift=drift)
    U = rng.random(g.size)
    w = rng.random(g.size)
    Dz = model.diffusion.dz(g.face_density(U), 0.0)
    dz = None if drift is None else model.drift.dz(U, 0.0)
    lo, di, up = density_derivative(g, Dz, dz, w)
    G = np.diag(di) + np.diag(lo[1:], -1) + np.diag(up[:-1], 1)
    eps = 1e-6
    fd = np.zeros_like(G)
    for j in range(g.size):
        e = np.zeros(g.size)
        e[j] = eps
        fd[:, j] = (assemble(model, g, U + e).matrix @ w - assemble(model, g, U - e).matrix @ w) / (2 * eps)
    np.testing.assert_allclose(G, fd, atol=1e-6 * np.abs(fd).max())


@pytest.mark.parametrize("kind", ["neumann", "robin", "dirichlet"])
def test_eigenpair_vs_dense(kind):
    g = grid(kind, 24, weight=(0.5, 1.5))
    op = assemble(make_model("1 + a"), g, a=0.5)
    pair = principal_eigenpair(op)
    s = np.sqrt(g.weights)
    sym = (s[:, None] * op.matrix.toarray()) / s[None, :]
    vals = la.eigh(0.5 * (sym + sym.T), eigvals_only=True)
    assert pair.value == pytest.approx(vals[0], rel=1e-9, abs=1e-9)
    assert pair.vector.max() == 1.0 and pair.vector.min() >= 0
    np.testing.assert_allclose(op.matrix @ pair.vector, pair.value * pair.vector, atol=1e-8 * op.norm())


def test_neumann_null_mode():
    pair = laplacian_eigenpair(grid("neumann", 32))
    assert pair.value == 0.0
    np.testing.assert_allclose(pair.vector, 1.0)


def test_dirichlet_closed_form_and_richardson():
    errs = []
    for n in (16, 32, 64):
        g = grid("dirichlet", n)
        pair = laplacian_eigenpair(g)
        assert pair.value == pytest.approx(4 / g.h**2 * np.sin(np.pi * g.h / 2) ** 2, rel=1e-10)
        np.testing.assert_allclose(pair.vector, np.sin(np.pi * g.x_active) / np.sin(np.pi * g.x_active).max(), atol=1e-8)
        errs.append(abs(pair.value - np.pi**2))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all((3.9 < ratios) & (ratios < 4.1))


def test_grid_helpers():
    g = grid("dirichlet", 4)
    assert g.weights.sum() == pytest.approx(0.75)
    np.testing.assert_allclose(g.to_global(np.ones(3)), [0, 1, 1, 1, 0])
    np.testing.assert_allclose(g.face_density(np.array([2.0, 4.0, 6.0])), [1, 3, 5, 3])
    assert grid("neumann", 4).weights.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        SpatialGrid(1.0, 1)


def test_bands_batch_over_ages():
    g = grid("neumann", 6)
    D = np.array([np.ones(6), 2 * np.ones(6)])
    lo, di, up = bands(g, D)
    assert di.shape == (2, g.size)
    np.testing.assert_allclose(di[1], 2 * di[0])
