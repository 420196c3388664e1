"""Pointwise minimisation of ``alpha -> f(x, mu, alpha) z + g(x, mu, alpha)``."""

from typing import NamedTuple

import numpy as np

from .errors import NewtonDiverged, SingularHessian
from .kernels import OK, STATUS_TEXT, newton_vectorized
from .measure import EmpiricalMeasure, moment


class ControlSolve(NamedTuple):
    alpha_hat: float
    residual: float
    iterations: int
    hessian_min_eig: float
    damped: bool = False
    in_cone: bool | None = None


class ConeCheck(NamedTuple):
    inside: bool
    margin: float


class ControlDerivatives(NamedTuple):
    d_x: float
    d_z: float
    d_mu: np.ndarray  # one entry per particle of the measure


class ConeSamples(NamedTuple):
    """Vectorised sample points: states, feature moments (K, n), first moments, costates."""

    x: np.ndarray
    moments: np.ndarray
    mass: np.ndarray
    z: np.ndarray


def _moments(model, mu):
    if isinstance(mu, EmpiricalMeasure):
        return model.moments(mu)
    return np.asarray(mu, dtype=float)


def cone_bound(k0, x, first_moment):
    return 0.5 * k0 * (1.0 + np.abs(x) + first_moment)


def cone_check(model, cascade, x, mu, z):
    """Membership of (x, mu, z) in the cone |z| <= k0 (1 + |x| + ||mu||_1) / 2."""
    margin = float(cone_bound(cascade.k0, x, moment(mu, 1)) - abs(float(z)))
    return ConeCheck(margin >= 0.0, margin)


def solve_control(model, x, mu, z, warm_start=None, newton_tol=1e-12, max_iter=50, cascade=None):
    """Newton solve of the first-order condition at one point.

    A residual increase triggers bisection damping and sets ``damped``.  If
    ``cascade`` is given and ``mu`` is a measure, the cone membership of the
    query is attached to the result and to any NewtonDiverged raised.
    """
    M = _moments(model, mu)
    a0 = 0.0 if warm_start is None else float(warm_start)
    alpha, resid, iters, H, status, damped = newton_vectorized(
        model.kernels, np.float64(x), M, np.float64(z), np.float64(a0), model.params, newton_tol, max_iter
    )
    in_cone = None
    if cascade is not None and isinstance(mu, EmpiricalMeasure):
        in_cone = cone_check(model, cascade, x, mu, z).inside
    if int(status) != OK:
        raise NewtonDiverged(
            f"control solve failed at x={float(x):g}, z={float(z):g}: {STATUS_TEXT[int(status)]}",
            alpha=float(alpha), residual=float(resid), in_cone=in_cone,
        )
    return ControlSolve(float(alpha), float(resid), int(iters), float(H), bool(damped), in_cone)


def control_derivatives(model, x, mu, z, alpha_hat):
    """Implicit-function derivatives of the minimiser in x, z and the measure.

    The measure derivative is returned at every particle of ``mu``.
    """
    M = model.moments(mu)
    H = float(model.raw("drift_aa", x, M, alpha_hat) * z + model.raw("running_aa", x, M, alpha_hat))
    if not np.isfinite(H) or abs(H) < 1e-14:
        raise SingularHessian(f"Hessian {H!r} at x={x}, z={z}")
    cross_x = model.raw("drift_xa", x, M, alpha_hat) * z + model.raw("running_xa", x, M, alpha_hat)
    d_x = -float(cross_x) / H
    d_z = -float(model.raw("drift_a", x, M, alpha_hat)) / H
    y = mu.points[:, 0]
    cross_m = (model.measure_derivative("drift_am", x, M, alpha_hat, y) * z
               + model.measure_derivative("running_am", x, M, alpha_hat, y))
    return ControlDerivatives(d_x, d_z, -np.asarray(cross_m, dtype=float) / H)


def solve_control_many(model, x, M, z, warm_start=0.0, newton_tol=1e-12, max_iter=50):
    """Vectorised solve over sample points with moments ``M`` of shape (K, n)."""
    alpha, resid, _, H, status, _ = newton_vectorized(
        model.kernels, x, M, z, warm_start, model.params, newton_tol, max_iter
    )
    bad = np.flatnonzero(status)
    if bad.size:
        i = bad[0]
        raise NewtonDiverged(
            f"control solve failed at sample {i} (x={x[i]:g}, z={z[i]:g}): {STATUS_TEXT[int(status[i])]}",
            alpha=float(alpha[i]), residual=float(resid[i]),
        )
    return alpha, H


def coercivity_check(model, samples):
    """Worst (largest) value of d_z alpha_hat * d_alpha f over cone samples.

    For scalar state and control the bilinear form reduces to this product,
    which must stay below ``-lambda_f^2 / (Lambda_g + lambda_g / 20)``.
    """
    alpha, H = solve_control_many(model, samples.x, samples.moments, samples.z)
    f_a = model.raw("drift_a", samples.x, samples.moments, alpha)
    return float(np.max(-f_a * f_a / H))
