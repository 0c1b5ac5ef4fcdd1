import numpy as np
import pytest

from hybridglue.errors import BadEnergyBand, ModelNotFound, NotHurwitz
from hybridglue.hybrid_core import SimParams, simulate_hybrid
from hybridglue.models import (
    REGISTRY,
    BundleInvalid,
    bouncing_ball,
    get_model,
    list_models,
    register_model,
    reflected_double_integrator,
)


def test_parameter_validation():
    with pytest.raises(BadEnergyBand):
        bouncing_ball(delta_lo=5.0, delta_hi=1.0, validate=False)
    with pytest.raises(BadEnergyBand):
        bouncing_ball(delta_lo=0.0, validate=False)
    with pytest.raises(ValueError):
        bouncing_ball(rho=0.0, validate=False)
    with pytest.raises(ValueError):
        bouncing_ball(mass=-1.0, validate=False)
    with pytest.raises(ValueError):
        reflected_double_integrator(a12=0.0, validate=False)
    with pytest.raises(ValueError):
        reflected_double_integrator(b=0.0, validate=False)
    with pytest.raises(NotHurwitz):
        reflected_double_integrator(K=(0.0, 0.0), validate=False)


def test_registry_listing():
    text = list_models()
    assert [line.split(":")[0] for line in text.splitlines()] == ["bouncing_ball", "reflected_di", "ripple"]
    assert "ripple: (no parameters)" in text
    assert list_models() == text
    reg = dict(REGISTRY)
    register_model("ball_copy", bouncing_ball, {"rho": 1.0}, registry=reg)
    assert len(list_models(reg).splitlines()) == 4 and "ball_copy" not in REGISTRY
    assert list_models({}) == ""


def test_get_model_errors():
    with pytest.raises(ModelNotFound):
        get_model("pendulum")
    with pytest.raises(ValueError):
        get_model("ripple", radius=2.0)


def test_defaults_and_validation_records(ball, ripple, reflected):
    assert ball.defaults["x0"] == [2.0, -3.0] and ball.params["poles"] == [-2.0, -3.0, -4.0]
    assert ripple.ekf is not None and ripple.observer is None
    assert reflected.defaults["x0"] == [3.0, 8.0, 1.0] and reflected.defaults["r0"] == [0.0, 6.0, 1.0]
    for b in (ball, ripple, reflected):
        assert b.validation and all(r.passed for r in b.validation.values())


def test_bundle_invalid_is_raised_for_broken_construction(monkeypatch):
    import hybridglue.models as models
    from hybridglue.hybrid_core import CheckResult

    monkeypatch.setattr(models, "_check", lambda residual, tol: CheckResult(False, float(residual)))
    with pytest.raises(BundleInvalid):
        models.ripple_model()


@pytest.mark.parametrize("name", ["ball", "ripple"])
def test_invariant_set_is_forward_invariant(name, request, rng):
    b = request.getfixturevalue(name)
    for x0 in b.inv_set.sample(rng, 30):
        ex = simulate_hybrid(b.sys, x0, SimParams(3.0, 1e-2))
        for arc in ex.arcs:
            assert b.in_E(arc.x).all()


def test_ball_parameterisation_roundtrip(ball, rng):
    x = ball.inv_set.sample(rng, 100)
    back = np.array([ball.inv_set.parameterization(ball.inv_set.chart(p)) for p in x])
    np.testing.assert_allclose(back, x, atol=1e-10)


@pytest.mark.parametrize("rho", [0.5, 2.0])
def test_ball_overrides_keep_closed_forms_consistent(rho, rng):
    b = get_model("bouncing_ball", rho=rho)
    x = b.inv_set.sample(rng, 1000)
    z = b.gm.image(x)
    np.testing.assert_allclose(np.array([b.gm.inverse(zi) for zi in z]), x, atol=1e-9)
    pushed = np.array([b.gm.jacobian(xi) @ b.sys.f(xi) for xi in x])
    glued = np.array([b.glued.f(zi) for zi in z])
    np.testing.assert_allclose(glued, pushed, rtol=1e-10, atol=1e-9)
