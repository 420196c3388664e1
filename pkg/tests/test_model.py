import numpy as np
import pytest

from mfgflow.errors import ParamOutOfRange
from mfgflow.measure import dirac, gaussian, uniform
from mfgflow.model import (
    DeclaredConstants, NonLQExampleParams, check_l_derivative_identity, hamiltonian, lq_model,
    nonlq_model, phi_curvature, phi_slope, phi_value,
)

STEP = 1e-6
# (derivative kernel, base kernel, variable differentiated)
FIRST_ORDER = [
    ("drift_x", "drift", "x"), ("drift_a", "drift", "a"), ("drift_xx", "drift_x", "x"),
    ("drift_aa", "drift_a", "a"), ("drift_xa", "drift_x", "a"),
    ("running_x", "running", "x"), ("running_a", "running", "a"), ("running_xx", "running_x", "x"),
    ("running_aa", "running_a", "a"), ("running_xa", "running_x", "a"),
    ("terminal_x", "terminal", "x"), ("terminal_xx", "terminal_x", "x"),
]
MEASURE_ORDER = [
    ("drift_m", "drift"), ("drift_xm", "drift_x"), ("drift_am", "drift_a"),
    ("running_m", "running"), ("running_xm", "running_x"), ("running_am", "running_a"),
    ("terminal_m", "terminal"), ("terminal_xm", "terminal_x"),
]


@pytest.fixture(params=["lq", "nonlq"])
def model(request):
    # the largest admissible drift perturbation makes its derivatives visible
    return lq_model() if request.param == "lq" else nonlq_model(eps1=0.01, eps3=0.1)


@pytest.fixture
def sample(rng):
    x = rng.uniform(-2, 2, 20)
    a = rng.uniform(-2, 2, 20)
    M = np.array([rng.uniform(-1, 1), rng.uniform(0.4, 2.0)])[:, None] + np.zeros(20)
    return x, M, a


def _shift(x, M, a, var, d):
    return (x + d, M, a) if var == "x" else (x, M, a + d)


@pytest.mark.parametrize("deriv,base,var", FIRST_ORDER)
def test_kernel_derivatives_match_differences(model, sample, deriv, base, var):
    x, M, a = sample
    up = model.raw(base, *_shift(x, M, a, var, STEP))
    dn = model.raw(base, *_shift(x, M, a, var, -STEP))
    assert np.max(np.abs((up - dn) / (2 * STEP) - model.raw(deriv, x, M, a))) < 1e-6


@pytest.mark.parametrize("deriv,base", MEASURE_ORDER)
def test_moment_gradients_match_differences(model, sample, deriv, base):
    x, M, a = sample
    exact = model.raw(deriv, x, M, a)
    for k in range(model.n_features):
        e = np.zeros_like(M)
        e[k] = STEP
        fd = (model.raw(base, x, M + e, a) - model.raw(base, x, M - e, a)) / (2 * STEP)
        assert np.max(np.abs(fd - exact[k])) < 1e-6


def test_feature_slopes_match_differences(model, rng):
    y = rng.uniform(-3, 3, 50)
    fd = (model.feature_values(y + STEP) - model.feature_values(y - STEP)) / (2 * STEP)
    assert np.max(np.abs(fd - model.feature_slopes(y))) < 1e-6


@pytest.mark.parametrize("which", ["lq", "nonlq"])
def test_lions_derivative_identity(which):
    model = lq_model() if which == "lq" else nonlq_model(eps1=0.01, eps3=0.1)
    mu = gaussian(0.2, 0.8, 12, 4)
    assert check_l_derivative_identity(model, mu, 0.7, -0.3).worst < 1e-5


def test_lq_coefficients():
    m = lq_model()
    mu = uniform([1.0, 2.0])
    assert m.drift(0.5, mu, -0.25) == pytest.approx(-0.25)
    assert m.running_cost(2.0, mu, 1.0) == pytest.approx(2.5)
    assert m.terminal_cost(3.0, mu) == pytest.approx(4.5)
    assert hamiltonian(m, 1.0, mu, 2.0, -2.0) == pytest.approx(-4.0 + 2.0 + 0.5)


def test_nonlq_uses_the_feature_moments():
    m = nonlq_model()
    mu = uniform([-2.0, 0.0, 3.0])
    M = m.moments(mu)
    assert M[0] == pytest.approx(1 / 3)
    assert M[1] == pytest.approx(np.mean(phi_value(np.array([-2.0, 0.0, 3.0]))))


def test_phi_is_twice_continuously_differentiable():
    for knot in (-1.0, 1.0):
        left, right = knot - 1e-9, knot + 1e-9
        for f in (phi_value, phi_slope, phi_curvature):
            assert f(np.array(left)) == pytest.approx(f(np.array(right)), abs=1e-7)
    y = np.linspace(-3, 3, 601)
    assert np.all(phi_value(y) >= np.abs(y) - 1e-15)
    assert np.all(np.abs(phi_slope(y)) <= 1.0 + 1e-15)


@pytest.mark.parametrize("field,value", [("eps1", 0.02), ("eps2", 0.99), ("eps3", 0.2), ("eps4", 1.0), ("eps1", 0.0)])
def test_parameter_ranges(field, value):
    with pytest.raises(ParamOutOfRange, match=field):
        NonLQExampleParams(**{field: value})


def test_nonlq_declared_constants():
    c = nonlq_model().constants
    assert c.drift_control_lower == 0.99
    assert c.drift_bound == 1.02
    assert c.running_convexity == c.running_bound == c.terminal_convexity == c.terminal_bound == 1.0
    assert c.drift_curvature < 1e-6


def test_declared_constants_are_validated():
    good = nonlq_model().constants.as_dict()
    good.pop("drift_bound")
    with pytest.raises(ValueError):
        DeclaredConstants(**dict(good, running_monotone_defect=1.5))
    with pytest.raises(ValueError):
        DeclaredConstants(**dict(good, drift_control_lower=0.0))
    with pytest.raises(ValueError):
        DeclaredConstants(**dict(good, running_bound=np.inf))


def test_only_scalar_models():
    m = lq_model()
    with pytest.raises(ValueError):
        type(m)(m.name, m.kernels, m.params, m.n_features, m.constants, d_x=2)


def test_dirac_moments_for_lq():
    assert lq_model().moments(dirac(2.0)).shape[0] == lq_model().n_features
