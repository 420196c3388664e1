import numpy as np
import pytest

from mfgflow.master import (
    FDSteps, check_dxV_equals_Z, dmV_closed_form, dtV_closed_form, master_residual, quadrature_weights,
    value, value_record, values,
)
from mfgflow.measure import EmpiricalMeasure, dirac, gaussian
from mfgflow.solver import solve_global
from oracles import lq_value


@pytest.mark.parametrize("n", [4, 5])
def test_quadrature_weights(n):
    w, rule = quadrature_weights(n, 0.25)
    s = np.linspace(0, 0.25 * n, n + 1)
    assert rule == ("simpson" if n % 2 == 0 else "trapezoid")
    assert w @ np.ones_like(s) == pytest.approx(0.25 * n)
    assert w @ s == pytest.approx((0.25 * n) ** 2 / 2)
    if rule == "simpson":
        assert w @ s**3 == pytest.approx((0.25 * n) ** 4 / 4)


@pytest.mark.parametrize("x0", [-1.0, 2.0])
def test_lq_value(lq, x0):
    model, cascade = lq
    sol = solve_global(model, cascade, dirac(x0), 0.0, 1.0, 1e-3)
    assert value(model, sol, 0) == pytest.approx(lq_value(x0), abs=1e-9)


def test_dxV_is_the_costate(nonlq):
    model, cascade = nonlq
    sol = solve_global(model, cascade, gaussian(0.0, 1.0, 8, 5).with_probes([-0.5, 0.8]), 0.0, 0.5, 1e-3)
    assert check_dxV_equals_Z(model, sol, 1) < 1e-6


def _nudge(mu, j, d):
    pts = mu.points.copy()
    pts[j] += d
    return EmpiricalMeasure(pts, mu.weights, mu.probes)


def test_measure_derivative_closed_form(nonlq):
    model, cascade = nonlq
    mu = gaussian(0.0, 1.0, 6, 5).with_probes([0.3])
    sol = solve_global(model, cascade, mu, 0.0, 0.5, 1e-3)
    probe, h = sol.n_points, 1e-5
    for j in (0, 3):
        up = values(model, solve_global(model, cascade, _nudge(mu, j, h), 0.0, 0.5, 1e-3))[probe]
        dn = values(model, solve_global(model, cascade, _nudge(mu, j, -h), 0.0, 0.5, 1e-3))[probe]
        fd = (up - dn) / (2 * h * mu.weights[j])
        assert dmV_closed_form(model, sol, None, j) == pytest.approx(fd, abs=1e-6)


def test_time_derivative_closed_form(nonlq):
    model, cascade = nonlq
    mu = gaussian(0.0, 1.0, 6, 5).with_probes([0.3])
    sol = solve_global(model, cascade, mu, 0.0, 0.5, 1e-3)
    probe, h = sol.n_points, 1e-2
    up = values(model, solve_global(model, cascade, mu, h, 0.5, 1e-3))[probe]
    dn = values(model, solve_global(model, cascade, mu, -h, 0.5, 1e-3))[probe]
    assert dtV_closed_form(model, sol) == pytest.approx((up - dn) / (2 * h), abs=1e-4)


def test_lq_value_record(lq):
    model, cascade = lq
    sol = solve_global(model, cascade, gaussian(0.0, 1.0, 4, 1).with_probes([0.7]), 0.0, 1.0, 1e-3)
    rec = value_record(model, sol)
    assert rec.V == pytest.approx(lq_value(0.7), abs=1e-9)
    assert rec.dxV == pytest.approx(0.7, abs=1e-9)
    assert rec.residual < 1e-8
    assert set(rec.as_dict()) >= {"V", "dxV", "dtV", "residual", "quadrature"}


def test_lq_master_residual(lq):
    model, cascade = lq

    def factory(t, mu):
        return solve_global(model, cascade, mu, t, 1.0, 1e-3)

    r = master_residual(model, factory, 0.0, 0.5, gaussian(0.0, 1.0, 4, 1), FDSteps(1e-2, 1e-3))
    assert r < 1e-6
