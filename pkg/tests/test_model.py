import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agebif.model import BoundarySpec, ReactionSpec, holling_tanner_setup, make_model, validate


def test_constant_model_passes():
    report = validate(make_model("1", "1", "2"))
    assert report.passed, str(report)


@pytest.mark.parametrize(
    "kwargs, invariant",
    [
        (dict(diffusion="1 - z"), "diffusion D(z,a) >= d0 > 0"),
        (dict(mortality="1 - z"), "mortality mu(z,a) >= 0"),
        (dict(birth="2 - z"), "birth b(z,a) >= 0"),
        (dict(birth="z"), "b(0,.) not identically zero"),
        (dict(drift="1 + z"), "drift d(0,a) = 0"),
        (dict(mortality="a"), "mu(0,a) > 0 for a near 0"),
    ],
)
def test_violations(kwargs, invariant):
    report = validate(make_model(**kwargs))
    assert not report.passed
    assert invariant in report.invariants()


def test_violation_locates_sample():
    report = validate(make_model(diffusion="1 - z"), sample_density=[0.5, 2.0])
    (v,) = [v for v in report.violations if v.invariant.startswith("diffusion")]
    assert v.z == 2.0 and v.value == pytest.approx(-1.0)
    assert "z=2" in str(v)


def test_evaluation_failure_is_a_violation():
    report = validate(make_model(birth="1/z"))
    assert not report.passed
    assert any("evaluates" in s for s in report.invariants())


def test_growth_regime_skips_initial_mortality_check():
    model = holling_tanner_setup(make_model("1", "0", "0.5"))
    assert validate(model).passed


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.floats(0, 10), min_size=1, max_size=5),
    st.lists(st.floats(0, 10), min_size=0, max_size=5),
    st.sampled_from(["1 - 0.3*z", "1 + z", "2 - z*a", "0.5 + sin(3*z)"]),
)
def test_validation_monotone_in_samples(base, extra, diffusion):
    model = make_model(diffusion, "1", "2 - 0.1*z")
    small = validate(model, base).invariants()
    large = validate(model, base + extra).invariants()
    assert small <= large


def test_boundary_spec():
    assert BoundarySpec("Neumann").kind == "neumann"
    assert BoundarySpec("robin", (0.5, 2.0)).weights == (0.5, 2.0)
    assert BoundarySpec("robin", 1.5).weights == (1.5, 1.5)
    assert BoundarySpec("neumann", 3.0).weights == (0.0, 0.0)
    assert BoundarySpec("dirichlet").delta == 1
    with pytest.raises(ValueError):
        BoundarySpec("periodic")
    with pytest.raises(ValueError):
        BoundarySpec("robin", -1.0)


def test_model_checks():
    with pytest.raises(ValueError):
        make_model(max_age=float("inf"))
    with pytest.raises(ValueError):
        make_model(length=0.0)
    with pytest.raises(ValueError):
        make_model(mortality_sign=2)


def test_holling_tanner_setup():
    base = make_model("1", "0", "0.5")
    ht = holling_tanner_setup(base, sign=-1)
    assert ht.mode == "holling-tanner" and ht.mortality_sign == -1 and ht.increasing_mode
    assert base.mode == "standard"
    assert ReactionSpec(1, "exponent").pde_sign == -1
    assert ReactionSpec(1, "balance").pde_sign == 1
    with pytest.raises(ValueError):
        ReactionSpec(0)


def test_hash_stable_and_sensitive():
    a = make_model("1", "1 + z", "2/(1+z)")
    b = make_model("1", "1 + z", "2/(1+z)")
    c = make_model("1", "1 + z", "2/(1+z)", boundary="dirichlet")
    assert a.hash() == b.hash() != c.hash()
    assert holling_tanner_setup(a).hash() != a.hash()
    assert a.describe()["mode"] == "standard"
