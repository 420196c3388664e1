"""Value function along characteristics and checks of the master equation."""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .measure import EmpiricalMeasure
from .solver import jacobian_flow_m, jacobian_flow_t, solve_global


@dataclass
class ValueRecord:
    V: float
    dxV: float
    dtV: float
    dmV: np.ndarray
    residual: float
    quadrature: str

    def as_dict(self):
        return {
            "V": self.V, "dxV": self.dxV, "dtV": self.dtV,
            "dmV_max_abs": float(np.max(np.abs(self.dmV))) if self.dmV.size else 0.0,
            "residual": self.residual, "quadrature": self.quadrature,
        }


class FDSteps(NamedTuple):
    time: float
    particle: float


def quadrature_weights(n_steps, h):
    """Composite Simpson weights when n_steps is even, trapezoid otherwise."""
    w = np.full(n_steps + 1, h)
    if n_steps % 2 == 0:
        w[1:-1:2] = 4 * h / 3
        w[2:-1:2] = 2 * h / 3
        w[0] = w[-1] = h / 3
        return w, "simpson"
    w[0] = w[-1] = h / 2
    return w, "trapezoid"


def _node_moments(solution):
    model = solution.model
    return np.stack(np.broadcast_arrays(*model.kernels.features(solution.X, model.params))) @ solution.weights


def running_costs(model, solution):
    M = _node_moments(solution)[..., None]
    return model.raw("running", solution.X, M, solution.alpha)


def values(model, solution):
    """V at the starting point of every particle and probe."""
    XT = solution.X[-1]
    terminal = model.raw("terminal", XT, model.moments(XT, solution.weights))
    q, _ = quadrature_weights(solution.grid.n_steps, solution.grid.step)
    return terminal + q @ running_costs(model, solution)


def value(model, solution, index):
    return float(values(model, solution)[index])


def check_dxV_equals_Z(model, solution, probe, step=1e-5):
    """|central difference of V in the probe's start position - Z at that probe|."""
    return float(dxV_discrepancies(model, solution, [probe], step)[0])


def dxV_discrepancies(model, solution, probes=None, step=1e-5):
    """check_dxV_equals_Z for several probes at once.

    One extra solve carries every probe and its two neighbours; zero-weight
    probes leave the measure untouched, so they all share the same flow.
    """
    if probes is None:
        probes = range(solution.n_probes)
    x = solution.initial.probes[list(probes), 0]
    stencil = np.stack([x - step, x, x + step], axis=1).ravel()
    mu = solution.initial.without_probes().with_probes(stencil)
    g = solution.grid
    sol = solve_global(model, solution.cascade, mu, g.t_start, g.t_end, g.step, solution.settings)
    V = values(model, sol)[sol.n_points :].reshape(-1, 3)
    Z = sol.Z[0, sol.n_points :].reshape(-1, 3)
    fd = (V[:, 2] - V[:, 0]) / (2 * step)
    return np.abs(fd - Z[:, 1])


def _nudged(mu, j, delta):
    pts = mu.points.copy()
    pts[j, 0] += delta
    return EmpiricalMeasure(pts, mu.weights, mu.probes)


def master_residual(model, solution_factory, t, x, m, fd_steps):
    """Left side of the master equation at (t, x, m), assembled from re-solves.

    ``solution_factory(t, mu)`` must return a FlowSolution started at (t, mu)
    on a fixed horizon.  Time derivative and measure derivative are central
    differences with steps ``fd_steps.time`` and ``fd_steps.particle``; the
    space derivative is the costate itself.
    """
    if isinstance(fd_steps, (int, float)):
        fd_steps = FDSteps(float(fd_steps), float(fd_steps))
    mu = m.without_probes().with_probes([x])
    base = solution_factory(t, mu)
    n = base.n_points
    probe = n

    def V_at(sol):
        return values(model, sol)[probe]

    dtV = (V_at(solution_factory(t + fd_steps.time, mu)) - V_at(solution_factory(t - fd_steps.time, mu))) / (
        2 * fd_steps.time
    )
    z = base.Z[0, probe]
    a = base.alpha[0, probe]
    M = model.moments(mu)
    own = float(model.raw("drift", x, M, a) * z + model.raw("running", x, M, a))
    transport = 0.0
    drifts = base.F[0, :n]
    for j in range(n):
        up = V_at(solution_factory(t, _nudged(mu, j, fd_steps.particle)))
        dn = V_at(solution_factory(t, _nudged(mu, j, -fd_steps.particle)))
        # w_j * dmV(y_j) with dmV realised as the N-scaled particle gradient
        transport += (up - dn) / (2 * fd_steps.particle) * drifts[j]
    return float(abs(dtV + own + transport))


def _coupling(model, solution, index):
    """(d_mu g + d_mu f * Z) of agent ``index`` against every cloud point, per node."""
    n = solution.n_points
    X = solution.X
    M = _node_moments(solution)[..., None]
    xi = X[:, index : index + 1]
    ai = solution.alpha[:, index : index + 1]
    zi = solution.Z[:, index : index + 1]
    y = X[:, :n]
    return (model.measure_derivative("running_m", xi, M, ai, y)
            + model.measure_derivative("drift_m", xi, M, ai, y) * zi)


def _terminal_coupling(model, solution, index):
    n = solution.n_points
    XT = solution.X[-1]
    M = model.moments(XT, solution.weights)
    return model.measure_derivative("terminal_m", XT[index], M, None, XT[:n])


def dtV_closed_form(model, solution, jacobians=None, index=None):
    """Time derivative of V from the starting-time sensitivity of the cloud."""
    index = _default_index(solution, index)
    dX_dt = jacobian_flow_t(solution)[0] if jacobians is None else jacobians
    n = solution.n_points
    w = solution.initial.weights
    q, _ = quadrature_weights(solution.grid.n_steps, solution.grid.step)
    inner = (_coupling(model, solution, index) * dX_dt[:, :n]) @ w
    terminal = (_terminal_coupling(model, solution, index) * dX_dt[-1, :n]) @ w
    M0 = model.moments(solution.X[0], solution.weights)
    x0, a0, z0 = solution.X[0, index], solution.alpha[0, index], solution.Z[0, index]
    here = model.raw("drift", x0, M0, a0) * z0 + model.raw("running", x0, M0, a0)
    return float(q @ inner + terminal - here)


def dmV_closed_form(model, solution, jacobians, j, index=None):
    """Measure derivative of V at the cloud point y_j.

    ``jacobians`` is the JacobianFlow returned by ``jacobian_flow_m`` for
    column ``j`` (computed here when None).
    """
    index = _default_index(solution, index)
    if jacobians is None:
        jacobians = jacobian_flow_m(model, solution, j)
    n = solution.n_points
    w = solution.initial.weights
    q, _ = quadrature_weights(solution.grid.n_steps, solution.grid.step)
    c = _coupling(model, solution, index)
    running = (c * jacobians.dX_dm[:, :n]) @ w + c[:, j] * jacobians.dX_dx[:, j]
    cT = _terminal_coupling(model, solution, index)
    terminal = cT @ (w * jacobians.dX_dm[-1, :n]) + cT[j] * jacobians.dX_dx[-1, j]
    return float(q @ running + terminal)


def _default_index(solution, index):
    if index is not None:
        return index
    return solution.n_points if solution.n_probes else 0


def value_record(model, solution, index=None):
    """V and its derivatives at one starting point, all read from a single solve."""
    index = _default_index(solution, index)
    n = solution.n_points
    dtV = dtV_closed_form(model, solution, index=index)
    dmV = np.array([dmV_closed_form(model, solution, None, j, index) for j in range(n)])
    x0, a0, z0 = solution.X[0, index], solution.alpha[0, index], solution.Z[0, index]
    M0 = model.moments(solution.X[0], solution.weights)
    own = model.raw("drift", x0, M0, a0) * z0 + model.raw("running", x0, M0, a0)
    transport = np.dot(solution.initial.weights * dmV, solution.F[0, :n])
    _, rule = quadrature_weights(solution.grid.n_steps, solution.grid.step)
    return ValueRecord(
        V=value(model, solution, index), dxV=float(z0), dtV=dtV, dmV=dmV,
        residual=float(abs(dtV + own + transport)), quadrature=rule,
    )
