import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mfgflow.errors import UnsupportedTransport
from mfgflow.measure import (
    EmpiricalMeasure, dirac, from_csv, gaussian, moment, push_forward, to_csv, uniform, wasserstein,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
clouds = arrays(np.float64, st.integers(1, 12), elements=finite)


def test_w1_between_uniform_pairs():
    assert wasserstein(uniform([0.0, 1.0]), uniform([0.0, 2.0]), 1) == pytest.approx(0.5, abs=1e-15)


def test_first_moment_of_uniform_cloud():
    assert moment(uniform([0.0, 3.0]), 1) == pytest.approx(1.5)


def test_w2_of_translated_cloud_is_the_shift():
    mu = gaussian(0.0, 1.0, 32, 3)
    nu = push_forward(mu, lambda x: x + 0.75)
    assert wasserstein(mu, nu, 2) == pytest.approx(0.75, rel=1e-12)


def test_unequal_weights_use_quantile_coupling():
    mu = EmpiricalMeasure(np.array([[0.0], [1.0]]), np.array([0.25, 0.75]), np.zeros((0, 1)))
    # all mass ends at 1: cost is the weight that has to travel
    assert wasserstein(mu, dirac(1.0), 1) == pytest.approx(0.25)


def test_rejects_bad_weights():
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.array([[0.0], [1.0]]), np.array([0.5, 0.6]), np.zeros((0, 1)))
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.array([[0.0], [1.0]]), np.array([1.5, -0.5]), np.zeros((0, 1)))


def test_higher_dimensions_need_equal_uniform_clouds():
    a = uniform(np.zeros((3, 2)))
    b = uniform(np.ones((4, 2)))
    with pytest.raises(UnsupportedTransport):
        wasserstein(a, b)
    c = uniform(np.ones((3, 2)))
    assert wasserstein(a, c, 1) == pytest.approx(np.sqrt(2))


def test_assignment_cap():
    a = uniform(np.zeros((5, 2)))
    with pytest.raises(UnsupportedTransport):
        wasserstein(a, a, 1, cap=4)


def test_probes_follow_push_forward_but_carry_no_mass():
    mu = uniform([0.0, 2.0], probes=[10.0])
    nu = push_forward(mu, lambda x: 2 * x)
    assert nu.probes[0, 0] == 20.0
    assert moment(nu, 1) == pytest.approx(2.0)


def test_csv_round_trip_is_exact():
    mu = gaussian(0.3, 1.7, 9, 11).with_probes([-1.0, 0.1 + 0.2])
    back = from_csv(to_csv(mu))
    assert np.array_equal(back.points, mu.points)
    assert np.array_equal(back.weights, mu.weights)
    assert np.array_equal(back.probes, mu.probes)


def test_gaussian_is_seeded():
    assert np.array_equal(gaussian(0, 1, 8, 5).points, gaussian(0, 1, 8, 5).points)


@settings(max_examples=60, deadline=None)
@given(clouds, clouds, clouds)
def test_w1_is_a_metric(x, y, z):
    a, b, c = uniform(x), uniform(y), uniform(z)
    assert wasserstein(a, a, 1) == 0.0
    assert wasserstein(a, b, 1) == pytest.approx(wasserstein(b, a, 1), abs=1e-12)
    assert wasserstein(a, c, 1) <= wasserstein(a, b, 1) + wasserstein(b, c, 1) + 1e-9


@settings(max_examples=60, deadline=None)
@given(clouds, clouds)
def test_w1_never_exceeds_w2(x, y):
    a, b = uniform(x), uniform(y)
    assert wasserstein(a, b, 1) <= wasserstein(a, b, 2) + 1e-9


@settings(max_examples=60, deadline=None)
@given(clouds, st.floats(-5, 5), st.floats(0.1, 3))
def test_affine_push_forward_scales_distance(x, shift, scale):
    mu = uniform(x)
    nu = uniform(np.asarray(x) + 1.0)
    f = lambda p: scale * p + shift  # noqa: E731
    d = wasserstein(push_forward(mu, f), push_forward(nu, f), 1)
    assert d == pytest.approx(scale * wasserstein(mu, nu, 1), rel=1e-9, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=finite))
def test_equal_size_clouds_match_assignment(x):
    # the 1-d quantile coupling and the assignment solver agree
    y = np.sort(x)[::-1] * 0.5 + 1.0
    fast = wasserstein(uniform(x), uniform(y), 2)
    slow = wasserstein(uniform(np.c_[x, np.zeros_like(x)]), uniform(np.c_[y, np.zeros_like(y)]), 2)
    assert fast == pytest.approx(slow, rel=1e-9, abs=1e-12)
