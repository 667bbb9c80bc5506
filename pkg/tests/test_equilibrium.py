import re

import numpy as np
import pytest

from agebif.ageprop import Discretization, find_lambda0
from agebif.equilibrium import (
    DensityField,
    MissingDerivativeError,
    continue_branch,
    jacobian,
    linearization_spectrum,
    parameter_derivative,
    residual,
    structural_nnz,
    tangent_at_critical,
)
from agebif.model import holling_tanner_setup, make_model

MODELS = {
    "neumann-drift": make_model("1 + z/(1+z) + a", "1 + z", "2/(1+z)", drift="0.1*z"),
    "dirichlet": make_model("1 + z^2", "1 + z*a", "3*exp(-z)", boundary="dirichlet"),
    "robin": make_model("1 + z", "1 + z", "3*exp(-z)", boundary="robin", robin_weight=(0.5, 1.0), drift="0.2*z"),
    "holling-tanner": holling_tanner_setup(make_model("1", "0.2*z", "0.5")),
}


def frozen(model):
    """The same model with every coefficient evaluated at zero density."""
    sub = lambda fn: None if fn is None else re.sub(r"\bz\b", "0", fn.text)
    m = make_model(sub(model.diffusion), sub(model.mortality), sub(model.birth),
                   boundary=model.boundary, length=model.length, max_age=model.max_age,
                   drift=sub(model.drift), mortality_sign=model.mortality_sign)
    return m if model.reaction is None else holling_tanner_setup(m, model.reaction.sign, model.reaction.wiring)


@pytest.mark.parametrize("name", sorted(MODELS))
def test_trivial_branch_exact(name):
    disc = Discretization(MODELS[name], 8, 6)
    for lam in (0.0, 1.3, 7.0):
        assert np.all(residual(disc, lam, np.zeros(disc.shape)) == 0.0)


@pytest.mark.parametrize("name", sorted(MODELS))
def test_jacobian_directional_fd(name):
    disc = Discretization(MODELS[name], 8, 6)
    rng = np.random.default_rng(11)
    delta = 1e-6
    for _ in range(5):
        u = 0.5 * rng.random(disc.shape)
        lam = 0.5 + rng.random()
        J = jacobian(disc, lam, u)
        for _ in range(20):
            v = rng.standard_normal(u.size)
            fd = (residual(disc, lam, u.ravel() + delta * v) - residual(disc, lam, u.ravel() - delta * v)) / (2 * delta)
            Jv = J @ v
            assert np.linalg.norm(fd - Jv) <= 1e-5 * np.linalg.norm(Jv)
        F = parameter_derivative(disc, lam, u)
        fd = (residual(disc, lam + delta, u) - residual(disc, lam - delta, u)) / (2 * delta)
        assert np.linalg.norm(fd - F) <= 1e-5 * max(np.linalg.norm(F), 1e-12)


@pytest.mark.parametrize("name", sorted(MODELS))
def test_structural_nonzeros(name):
    for n, M in ((8, 6), (5, 3)):
        disc = Discretization(MODELS[name], n, M)
        N = disc.grid.size
        J = jacobian(disc, 1.0, np.zeros(disc.shape))
        assert J.nnz == structural_nnz(disc) == (M + 1) * N + M * (M + 1) * (3 * N - 2)


@pytest.mark.parametrize("name", sorted(MODELS))
def test_jacobian_at_zero_is_frozen_linear_operator(name):
    model = MODELS[name]
    disc = Discretization(model, 8, 6)
    lin = Discretization(frozen(model), 8, 6)
    rng = np.random.default_rng(3)
    J = jacobian(disc, 1.1, np.zeros(disc.shape))
    for _ in range(3):
        v = rng.random(disc.shape)
        R = residual(lin, 1.1, v).reshape(disc.shape)
        if model.reaction is not None:
            # drop the quadratic part of the saturating reaction
            e = model.reaction.pde_sign
            R[1:] -= disc.ages.h * e * v[1:] ** 2 / (1 + v[1:])
        R = R.ravel()
        np.testing.assert_allclose(J @ v.ravel(), R, atol=1e-10 * np.abs(R).max())


def test_single_age_step_by_hand():
    model = make_model("1 + z", "1 + z", "2/(1+z)")
    disc = Discretization(model, 2, 1)
    h = 1.0
    dx = 0.5
    u = np.array([[0.3, 0.5, 0.2], [0.4, 0.1, 0.6]])
    U = h / 2 * (u[0] + u[1])
    Df = 1 + 0.5 * (U[:-1] + U[1:])
    A = np.array(
        [
            [2 * Df[0], -2 * Df[0], 0],
            [-Df[0], Df[0] + Df[1], -Df[1]],
            [0, -2 * Df[1], 2 * Df[1]],
        ]
    ) / dx**2
    mu0, mu1 = 1 + U, 1 + U
    lam = 0.8
    E = np.exp(-lam * h * (mu0 + mu1) / 2)
    b = 2 / (1 + U)
    birth_rows = u[0] - (h / 2 * b * u[0] + h / 2 * b * u[1])
    age_rows = u[1] + h * A @ u[1] - E * u[0]
    np.testing.assert_allclose(residual(disc, lam, u), np.concatenate([birth_rows, age_rows]), rtol=1e-13)


@pytest.fixture(scope="module")
def subcrit_setup():
    disc = Discretization(make_model("1", "1 + z", "2/(1+z)"), 32, 80)
    lam0, res = find_lambda0(disc)
    T = tangent_at_critical(disc, lam0, res.vector)
    return disc, lam0, res, T


def test_residual_along_tangent_is_second_order(subcrit_setup):
    disc, lam0, _, T = subcrit_setup
    eps = np.array([1e-2, 1e-3, 1e-4])
    r = [np.abs(residual(disc, lam0, e * T.u)).max() for e in eps]
    slope = np.polyfit(np.log(eps), np.log(r), 1)[0]
    assert 1.9 < slope < 2.1


def test_tangent_neumann_closed_form(neumann_disc):
    lam0, res = find_lambda0(neumann_disc)
    T = tangent_at_critical(neumann_disc, lam0, res.vector)
    shape = np.exp(-lam0 * neumann_disc.ages.nodes)
    expected = shape[:, None] * np.ones(neumann_disc.grid.size)
    expected /= DensityField.of(neumann_disc, expected).l2_norm()
    np.testing.assert_allclose(T.u, expected, atol=1e-9)
    assert T.l2_norm() == pytest.approx(1.0)
    np.testing.assert_allclose(
        tangent_at_critical(neumann_disc, lam0, res.vector, normalize=False).u[0], res.vector
    )


def test_tangent_dirichlet_closed_form():
    from agebif.ageprop import age_decay

    disc = Discretization(make_model("1", "1", "20", boundary="dirichlet"), 32, 80)
    lam0, res = find_lambda0(disc)
    T = tangent_at_critical(disc, lam0, res.vector)
    expected = (np.exp(-lam0 * disc.ages.nodes) * age_decay(disc, disc.sigma1))[:, None] * disc.phi1
    expected /= DensityField.of(disc, expected).l2_norm()
    np.testing.assert_allclose(T.u, expected, atol=1e-7)
    assert T.u.min() >= 0


def test_density_field_total_is_derived(neumann_disc):
    field = DensityField.zeros(neumann_disc)
    field.u[:] = 1.0
    np.testing.assert_allclose(field.U, 1.0)
    field.u[:] = 2.0
    np.testing.assert_allclose(field.U, 2.0)


def test_kernel_of_linearisation(subcrit_setup):
    disc, lam0, _, T = subcrit_setup
    small = Discretization(disc.model, 16, 40)
    lam0s, res = find_lambda0(small)
    s, angle = linearization_spectrum(small, lam0s, tangent_at_critical(small, lam0s, res.vector))
    assert s[0] / s[1] <= 1e-4
    assert angle <= 1e-3


def test_continuation_subcritical_branch(subcrit_setup):
    disc, lam0, _, T = subcrit_setup
    bd = continue_branch(disc, lam0, T, eps_max=0.3, steps=25)
    origin = [p for p in bd.points if p.eps == 0.0]
    assert len(origin) == 1 and origin[0].lam == lam0 and origin[0].residual_norm == 0.0
    assert all(p.residual_norm <= 1e-9 for p in bd.points)
    pos, neg = bd.positive(), bd.negative()
    assert len(pos) >= 10 and len(neg) >= 10
    assert all(p.lam < lam0 for p in pos)
    assert all(p.physical and p.min_entry >= -1e-8 * p.sup_norm for p in pos)
    assert not any(p.physical for p in neg)
    first = pos[0]
    agreement = DensityField.of(disc, first.u.u / first.eps - T.u).l2_norm() / T.l2_norm()
    assert agreement <= 0.1
    # continuity through eps = 0
    assert abs(pos[0].lam - lam0) < 0.05 and abs(neg[-1].lam - lam0) < 0.05
    eps = [p.eps for p in bd.points]
    assert eps == sorted(eps)
    assert bd.terminations == {"+": "eps_max reached", "-": "eps_max reached"}


def test_continuation_budget_and_zero_range(subcrit_setup):
    disc, lam0, _, T = subcrit_setup
    bd = continue_branch(disc, lam0, T, eps_max=0.0, steps=10)
    assert len(bd.points) == 1 and bd.points[0].lam == lam0
    bd = continue_branch(disc, lam0, T, eps_max=1.0, steps=3)
    assert len(bd.positive()) == 3 and len(bd.negative()) == 3
    assert bd.terminations["+"] == "step budget"


def test_fd_fallback_can_be_disabled():
    model = make_model("1", "1 + z", "2/(1+z)")
    disc = Discretization(model, 8, 8)
    with pytest.raises(MissingDerivativeError, match="mortality, birth"):
        jacobian(disc, 1.0, np.zeros(disc.shape), allow_fd=False)
    ok = make_model("1", "1 + z", "2/(1+z)", derivatives={"mortality": "1", "birth": "-2/(1+z)^2"})
    d2 = Discretization(ok, 8, 8)
    u = 0.2 * np.ones(d2.shape)
    np.testing.assert_allclose(
        jacobian(d2, 1.0, u, allow_fd=False).toarray(), jacobian(disc, 1.0, u).toarray(), atol=1e-7
    )


def test_continuation_requires_implicit_euler():
    disc = Discretization(make_model("1", "1 + z", "2/(1+z)"), 8, 8, scheme="crank-nicolson")
    lam0, res = find_lambda0(disc)
    with pytest.raises(ValueError, match="implicit Euler"):
        continue_branch(disc, lam0, tangent_at_critical(disc, lam0, res.vector), 0.1, 2)
