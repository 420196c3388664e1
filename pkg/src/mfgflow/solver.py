"""Forward-backward characteristic system on particle clouds.

``solve_local`` runs a Picard iteration between a forward RK4 sweep for the
states and a backward RK4 sweep for the costates.  ``solve_global`` pastes
short intervals together backward from the horizon: each interval's terminal
costate is the decoupling field of the later intervals, represented by its
value at the interface plus the particle Jacobian obtained from a Riccati
sweep.  The interfaces are then corrected by alternating forward and
backward passes until the costate is continuous.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import CapExceeded, IntervalUnderflow, NewtonDiverged, PicardDiverged
from .measure import EmpiricalMeasure, wasserstein


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if not self.t_start <= self.t_end:
            raise ValueError(f"t_start={self.t_start} exceeds t_end={self.t_end}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")

    @classmethod
    def from_step(cls, t_start, t_end, dt):
        if dt <= 0:
            raise ValueError("dt must be positive")
        span = t_end - t_start
        n = max(1, int(round(span / dt)))
        if span > 0 and abs(n * dt - span) > 1e-9 * max(1.0, span):
            raise ValueError(f"dt={dt} does not divide the horizon {span}")
        return cls(float(t_start), float(t_end), n)

    @property
    def step(self):
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def n_nodes(self):
        return self.n_steps + 1

    def times(self):
        return self.t_start + self.step * np.arange(self.n_nodes)

    def index_of(self, s):
        if self.step == 0:
            return 0
        k = int(round((s - self.t_start) / self.step))
        if not 0 <= k <= self.n_steps or abs(self.t_start + k * self.step - s) > 1e-9 * max(1.0, abs(s)):
            raise ValueError(f"time {s} is not a grid node")
        return k


@dataclass(frozen=True)
class SolverSettings:
    picard_tol: float = 1e-10
    max_picard: int = 200
    damping: float = 1.0
    newton_tol: float = 1e-12
    newton_max_iter: int = 50
    epsilon_init: float = 0.125
    epsilon_min: float = 1e-3
    interface_tol: float = 1e-9
    max_interface_rounds: int = 30
    jacobian_cap: int = 512
    use_numba: bool | None = None

    def __post_init__(self):
        for name in ("picard_tol", "newton_tol", "epsilon_init", "epsilon_min", "interface_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.max_picard < 1 or self.newton_max_iter < 1:
            raise ValueError("iteration budgets must be positive")


@dataclass(eq=False)
class FlowSolution:
    """Trajectories of every particle and probe on a uniform grid.

    Arrays have shape (n_nodes, n) with the measure's points first and its
    probes after them.  ``F`` and ``G`` are the state and costate rates at
    the nodes; they drive the Hermite interpolation between nodes.
    """

    model: object
    cascade: object
    settings: SolverSettings
    grid: TimeGrid
    initial: EmpiricalMeasure
    X: np.ndarray
    Z: np.ndarray
    alpha: np.ndarray
    F: np.ndarray
    G: np.ndarray
    picard_iterations: int
    interval_iterations: list
    interval_boundaries: list
    terminal_residual: float
    interface_mismatch: float = 0.0
    interface_rounds: int = 0
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def weights(self):
        return self.initial.all_weights()

    @property
    def n_points(self):
        return self.initial.size

    @property
    def n_probes(self):
        return self.initial.n_probes

    def probe_index(self, k):
        return self.n_points + k

    def times(self):
        return self.grid.times()

    def measure_at(self, node):
        n = self.n_points
        return EmpiricalMeasure(self.X[node, :n, None], self.initial.weights, self.X[node, n:, None])

    def first_moments(self):
        """||X(s)#m||_1 at every node."""
        n = self.n_points
        return np.abs(self.X[:, :n]) @ self.initial.weights

    def cone_margins(self):
        """k0 (1 + |X| + ||m_s||_1) / 2 - |Z| at every node and particle."""
        mass = self.first_moments()[:, None]
        return 0.5 * self.cascade.k0 * (1 + np.abs(self.X) + mass) - np.abs(self.Z)

    def growth_margins(self):
        """lstar0 (|X| + ||m_s||_1) - |Z|, the linear-growth form of the cone."""
        mass = self.first_moments()[:, None]
        return self.cascade.lstar0 * (np.abs(self.X) + mass) - np.abs(self.Z)

    def cone_violations(self, slack=1e-12):
        return int(np.count_nonzero(self.growth_margins() < -slack))


class JacobianFlow(NamedTuple):
    dX_dx: np.ndarray
    dZ_dx: np.ndarray
    dX_dm: np.ndarray | None = None
    dZ_dm: np.ndarray | None = None
    column: int | None = None


# --------------------------------------------------------------------------
# internal helpers


class _Context:
    def __init__(self, model, m, h, settings):
        self.model = model
        self.settings = settings
        self.h = h
        self.x0 = np.ascontiguousarray(m.all_positions()[:, 0])
        self.w = np.ascontiguousarray(m.all_weights())
        self.sweeps = kernels.sweeps_for(model, settings.use_numba)

    def moments(self, xs):
        return self.model.moments(xs, self.w)

    def terminal_gradient(self, XT):
        return np.ascontiguousarray(self.model.raw("terminal_x", XT, self.moments(XT)))


class _Piece(NamedTuple):
    X: np.ndarray
    Z: np.ndarray
    A: np.ndarray
    F: np.ndarray
    G: np.ndarray
    iterations: int


def _raise_newton(info, where=""):
    status, node, particle, _ = (int(v) for v in info)
    raise NewtonDiverged(f"{kernels.STATUS_TEXT[status]} at node {node}, particle {particle}{where}")


def _picard(ctx, x_start, n_steps, terminal_fn, guess=None):
    s = ctx.settings
    sw, h, w = ctx.sweeps, ctx.h, ctx.w
    if guess is None:
        Z = np.tile(terminal_fn(x_start), (n_steps + 1, 1))
        G = np.zeros_like(Z)
        A = np.zeros_like(Z)
    else:
        Z, G, A = guess.Z.copy(), guess.G.copy(), guess.A.copy()
    X_prev = None
    first, prev, rises = None, np.inf, 0
    for it in range(1, s.max_picard + 1):
        X, F, A, info = sw.forward(x_start, Z, G, A, h, w, s.newton_tol, s.newton_max_iter)
        if info[0]:
            _raise_newton(info, " (forward sweep)")
        zT = terminal_fn(X[-1])
        Z_new, G_new, A, info = sw.backward(X, F, zT, A, h, w, s.newton_tol, s.newton_max_iter)
        if info[0]:
            _raise_newton(info, " (backward sweep)")
        change = float(np.max(np.abs(Z_new - Z)))
        if X_prev is not None:
            change = max(change, float(np.max(np.abs(X - X_prev))))
        if not np.isfinite(change):
            raise PicardDiverged("non-finite iterate", it, change)
        if s.damping < 1.0:
            Z = Z + s.damping * (Z_new - Z)
            A, _, G, info = sw.rates(X, Z, A, w, s.newton_tol, s.newton_max_iter)
            if info[0]:
                _raise_newton(info, " (damped rates)")
        else:
            Z, G = Z_new, G_new
        if change <= s.picard_tol:
            A, F, G, info = sw.rates(X, Z, A, w, s.newton_tol, s.newton_max_iter)
            if info[0]:
                _raise_newton(info, " (final rates)")
            return _Piece(X, Z, A, F, G, it)
        first = change if first is None else first
        rises = rises + 1 if change > prev else 0
        if change > 1e6 * max(first, 1e-300) or rises >= 6:
            raise PicardDiverged(f"Picard residual grows ({change:.3e} after {it} iterations)", it, change)
        prev = change
        X_prev = X
    raise PicardDiverged(f"no convergence in {s.max_picard} Picard iterations", s.max_picard, prev)


def _solution(ctx, cascade, grid, m, piece_arrays, iterations, boundaries, mismatch=0.0, rounds=0):
    X, Z, A, F, G = piece_arrays
    residual = float(np.max(np.abs(Z[-1] - ctx.terminal_gradient(X[-1])))) if X.size else 0.0
    return FlowSolution(
        model=ctx.model, cascade=cascade, settings=ctx.settings, grid=grid, initial=m,
        X=X, Z=Z, alpha=A, F=F, G=G, picard_iterations=int(sum(iterations)),
        interval_iterations=list(iterations), interval_boundaries=list(boundaries),
        terminal_residual=residual, interface_mismatch=mismatch, interface_rounds=rounds,
    )


def _wrap_terminal(terminal_p, m):
    n = m.size

    def fn(XT):
        mu = EmpiricalMeasure(XT[:n, None], m.weights, XT[n:, None])
        return np.ascontiguousarray(np.asarray(terminal_p(XT, mu), dtype=float) + np.zeros(XT.shape))

    return fn


def terminal_gradient(model):
    """The terminal map x, mu -> d_x k(x, mu) in the form solve_local expects."""
    return lambda x, mu: model.evaluate("terminal_x", x, mu)


def solve_local(model, cascade, m, grid, terminal_p=None, settings=None):
    """Picard solve on one interval; ``terminal_p(x, mu)`` defaults to d_x k."""
    settings = settings or SolverSettings()
    ctx = _Context(model, m, grid.step, settings)
    fn = ctx.terminal_gradient if terminal_p is None else _wrap_terminal(terminal_p, m)
    piece = _picard(ctx, ctx.x0, grid.n_steps, fn)
    return _solution(ctx, cascade, grid, m, piece[:5], [piece.iterations], [grid.t_start, grid.t_end])


# --------------------------------------------------------------------------
# linearisation about a trajectory


class Coefficients(NamedTuple):
    a: np.ndarray     # state-rate self coefficient, (T, n)
    b: np.ndarray     # state-rate costate coefficient, (T, n)
    c: np.ndarray     # costate-rate state coefficient, (T, n)
    d: np.ndarray     # costate-rate self coefficient, (T, n)
    UF: np.ndarray    # state-rate moment sensitivities, (T, n, K)
    UG: np.ndarray    # costate-rate moment sensitivities, (T, n, K)
    Psi: np.ndarray   # weighted feature slopes, (T, K, n)


def _coefficients(model, X, Z, A, w):
    M = np.stack(np.broadcast_arrays(*model.kernels.features(X, model.params))) @ w
    M = M[..., None]
    ev = lambda name: model.raw(name, X, M, A)  # noqa: E731
    f_a, f_x = ev("drift_a"), ev("drift_x")
    H = ev("drift_aa") * Z + ev("running_aa")
    cross = ev("drift_xa") * Z + ev("running_xa")
    a_x, a_z = -cross / H, -f_a / H
    a_m = -(ev("drift_am") * Z + ev("running_am")) / H
    UF = ev("drift_m") + f_a * a_m
    UG = ev("drift_xm") * Z + ev("running_xm") + cross * a_m
    Psi = np.moveaxis(model.feature_slopes(X), 0, -2) * w
    return Coefficients(
        a=f_x + f_a * a_x,
        b=f_a * a_z,
        c=ev("drift_xx") * Z + ev("running_xx") + cross * a_x,
        d=f_x + cross * a_z,
        UF=np.moveaxis(UF, 0, -1),
        UG=np.moveaxis(UG, 0, -1),
        Psi=Psi,
    )


def hermite_mid(V, dV, h):
    return 0.5 * (V[:-1] + V[1:]) + 0.125 * h * (dV[:-1] - dV[1:])


def linearize(model, X, Z, A, F, G, w, h, settings):
    """Linear-system coefficients at the nodes and interval midpoints."""
    Xm, Zm = hermite_mid(X, F, h), hermite_mid(Z, G, h)
    Mm = (np.stack(np.broadcast_arrays(*model.kernels.features(Xm, model.params))) @ w)[..., None]
    Am, _, _, _, status, _ = kernels.newton_vectorized(
        model.kernels, Xm, Mm, Zm, A[:-1], model.params, settings.newton_tol, settings.newton_max_iter
    )
    if np.any(status):
        raise NewtonDiverged("control solve failed at an interval midpoint")
    return _coefficients(model, X, Z, A, w), _coefficients(model, Xm, Zm, Am, w)


def terminal_jacobian(model, XT, w):
    """Jacobian of the particle map X_T -> d_x k(X_T, X_T#m)."""
    M = model.moments(XT, w)
    U = np.moveaxis(model.raw("terminal_xm", XT, M), 0, -1)
    Psi = model.feature_slopes(XT) * w
    P = U @ Psi
    P[np.diag_indices_from(P)] += model.raw("terminal_xx", XT, M)
    return P


def _riccati_start(ctx, piece, PT):
    node, mid = linearize(ctx.model, piece.X, piece.Z, piece.A, piece.F, piece.G, ctx.w, ctx.h, ctx.settings)
    P0, _, _ = kernels.riccati_backward(PT, ctx.h, node, mid, store=False, numba_enabled=ctx.sweeps.compiled)
    return P0


# --------------------------------------------------------------------------
# interval pasting


def _partition(n_steps, h, eps):
    length = max(1, int(round(eps / h))) if h > 0 else n_steps
    cuts = [n_steps]
    while cuts[-1] - length > 0:
        cuts.append(cuts[-1] - length)
    cuts.append(0)
    return sorted(set(cuts))


class _Surrogate(NamedTuple):
    z: np.ndarray
    y: np.ndarray
    P: np.ndarray

    def __call__(self, XT):
        return self.z + self.P @ (XT - self.y)


def _paste(ctx, cascade, grid, m, cuts):
    J = len(cuts) - 1
    s = ctx.settings
    pieces = [None] * J
    surrogates = [None] * (J + 1)
    starts = [ctx.x0] * J

    def terminal_for(j):
        return ctx.terminal_gradient if j == J - 1 else surrogates[j + 1]

    def solve(j, start):
        try:
            return _picard(ctx, start, cuts[j + 1] - cuts[j], terminal_for(j), pieces[j])
        except (PicardDiverged, NewtonDiverged) as err:
            err.interval = j
            raise

    def backward_pass():
        for j in range(J - 1, -1, -1):
            pieces[j] = solve(j, starts[j])
            if j == 0:
                continue
            XT = pieces[j].X[-1]
            PT = terminal_jacobian(ctx.model, XT, ctx.w) if j == J - 1 else surrogates[j + 1].P
            P0 = _riccati_start(ctx, pieces[j], PT)
            surrogates[j] = _Surrogate(pieces[j].Z[0].copy(), pieces[j].X[0].copy(), P0)

    def forward_pass():
        worst = 0.0
        for j in range(J):
            start = ctx.x0 if j == 0 else pieces[j - 1].X[-1]
            pieces[j] = solve(j, start)
            if j:
                worst = max(worst, float(np.max(np.abs(pieces[j - 1].Z[-1] - pieces[j].Z[0]))))
        return worst

    backward_pass()
    mismatch = np.inf
    for rounds in range(1, s.max_interface_rounds + 1):
        mismatch = forward_pass()
        if mismatch <= s.interface_tol:
            break
        starts = [p.X[0] for p in pieces]
        backward_pass()
    else:
        raise PicardDiverged(f"interface costates still differ by {mismatch:.3e}", rounds, mismatch)

    arrays = []
    for field_index in range(5):
        parts = [pieces[0][field_index]] + [p[field_index][1:] for p in pieces[1:]]
        arrays.append(np.concatenate(parts, axis=0))
    # interface nodes take the values of the later interval
    for j in range(1, J):
        for field_index in range(5):
            arrays[field_index][cuts[j]] = pieces[j][field_index][0]
    boundaries = [grid.t_start + c * grid.step for c in cuts]
    boundaries[-1] = grid.t_end
    iters = [p.iterations for p in pieces]
    return _solution(ctx, cascade, grid, m, arrays, iters, boundaries, mismatch, rounds)


def solve_global(model, cascade, m, t0, T, dt, settings=None):
    """Solve on [t0, T] by pasting intervals of length at most epsilon_init.

    An interval whose Picard or Newton iteration fails is halved; halving
    below ``epsilon_min`` raises IntervalUnderflow.
    """
    settings = settings or SolverSettings()
    grid = TimeGrid.from_step(t0, T, dt)
    ctx = _Context(model, m, grid.step, settings)
    cuts = _partition(grid.n_steps, grid.step, settings.epsilon_init)
    while True:
        try:
            if len(cuts) == 2:
                try:
                    piece = _picard(ctx, ctx.x0, grid.n_steps, ctx.terminal_gradient)
                except (PicardDiverged, NewtonDiverged) as err:
                    err.interval = 0
                    raise
                return _solution(ctx, cascade, grid, m, piece[:5], [piece.iterations], [t0, T])
            return _paste(ctx, cascade, grid, m, cuts)
        except (PicardDiverged, NewtonDiverged) as err:
            j = getattr(err, "interval", None)
            if j is None:
                raise
            lo, hi = cuts[j], cuts[j + 1]
            half = (hi - lo) // 2
            if half < 1 or half * grid.step < settings.epsilon_min:
                raise IntervalUnderflow(
                    f"interval [{t0 + lo * grid.step:g}, {t0 + hi * grid.step:g}] cannot shrink "
                    f"below epsilon_min={settings.epsilon_min:g}: {err}"
                ) from err
            cuts.insert(j + 1, lo + half)


def eval_gamma(model, cascade, t, x, m, T, dt, settings=None):
    """Decoupling field at (t, x, m): the costate of zero-weight probes at x."""
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    if t == T:
        out = np.asarray(model.evaluate("terminal_x", xs, m.without_probes()), dtype=float)
    else:
        mu = m.without_probes().with_probes(xs)
        sol = solve_global(model, cascade, mu, t, T, dt, settings)
        out = sol.Z[0, mu.size:]
    return out if np.ndim(x) else float(out[0])


def flow_property_check(solution, t, s, tau):
    """max_i |X^{t,m}_tau(x_i) - X^{s, X_s#m}_tau(X_s(x_i))| after a restart at s."""
    grid = solution.grid
    i_t, i_s, i_tau = grid.index_of(t), grid.index_of(s), grid.index_of(tau)
    if not (i_t == 0 and i_t <= i_s <= i_tau):
        raise ValueError("need t = solution start <= s <= tau")
    if i_s == i_tau:
        return 0.0
    if i_s == i_t:
        restarted = solve_global(solution.model, solution.cascade, solution.initial,
                                 grid.t_start, grid.t_end, grid.step, solution.settings)
        return float(np.max(np.abs(restarted.X[i_tau] - solution.X[i_tau])))
    mu = solution.measure_at(i_s)
    t_s = grid.t_start + i_s * grid.step
    restarted = solve_global(solution.model, solution.cascade, mu, t_s, grid.t_end, grid.step, solution.settings)
    return float(np.max(np.abs(restarted.X[i_tau - i_s] - solution.X[i_tau])))


# --------------------------------------------------------------------------
# variational flows


def _solution_linearization(solution):
    if "linearization" not in solution.cache:
        solution.cache["linearization"] = linearize(
            solution.model, solution.X, solution.Z, solution.alpha, solution.F, solution.G,
            solution.weights, solution.grid.step, solution.settings,
        )
    return solution.cache["linearization"]


def jacobian_flow_x(model, solution):
    """d/dx of X and Z for each particle with the measure held fixed."""
    node, mid = _solution_linearization(solution)
    h = solution.grid.step
    XT = solution.X[-1]
    M = model.moments(XT, solution.weights)
    qT = model.raw("terminal_xx", XT, M) + np.zeros(XT.shape)
    diag = lambda c: (c.a, c.b, c.c, c.d)  # noqa: E731
    Q, dQ = kernels.scalar_riccati_numpy(qT, h, diag(node), diag(mid))
    dX = kernels.scalar_propagate_numpy(np.ones(XT.shape), h, Q, dQ, (node.a, node.b), (mid.a, mid.b))
    return JacobianFlow(dX, Q * dX)


def _full_riccati(solution):
    if "riccati" not in solution.cache:
        n = solution.X.shape[1]
        if n > solution.settings.jacobian_cap:
            raise CapExceeded(f"{n} particles exceed the Jacobian cap {solution.settings.jacobian_cap}")
        node, mid = _solution_linearization(solution)
        PT = terminal_jacobian(solution.model, solution.X[-1], solution.weights)
        _, Ps, dPs = kernels.riccati_backward(PT, solution.grid.step, node, mid, store=True,
                                              numba_enabled=_numba_flag(solution))
        solution.cache["riccati"] = (Ps, dPs)
    return solution.cache["riccati"]


def _numba_flag(solution):
    flag = solution.settings.use_numba
    return kernels.use_numba() if flag is None else flag


def particle_sensitivity(solution, V0):
    """Propagate initial perturbations V0 (n, c) of all particles through the flow.

    Returns (dX, dZ) with shape (n_nodes, n, c).
    """
    Ps, dPs = _full_riccati(solution)
    node, mid = _solution_linearization(solution)
    lin = lambda c: (c.a, c.b, c.UF, c.Psi)  # noqa: E731
    dX = kernels.propagate(np.asarray(V0, dtype=float), solution.grid.step, Ps, dPs, lin(node), lin(mid),
                           numba_enabled=_numba_flag(solution))
    return dX, Ps @ dX


def jacobian_flow_m(model, solution, j):
    """Measure derivative of X and Z at the cloud point y_j, for every particle."""
    if not 0 <= j < solution.n_points:
        raise IndexError(f"particle index {j} out of range")
    n = solution.X.shape[1]
    if n > solution.settings.jacobian_cap:
        raise CapExceeded(f"{n} particles exceed the Jacobian cap {solution.settings.jacobian_cap}")
    own = jacobian_flow_x(model, solution)
    e = np.zeros((n, 1))
    e[j, 0] = 1.0
    dX, dZ = particle_sensitivity(solution, e)
    wj = solution.weights[j]
    dX_dm = dX[:, :, 0].copy()
    dZ_dm = dZ[:, :, 0].copy()
    dX_dm[:, j] -= own.dX_dx[:, j]
    dZ_dm[:, j] -= own.dZ_dx[:, j]
    return JacobianFlow(own.dX_dx, own.dZ_dx, dX_dm / wj, dZ_dm / wj, j)


def jacobian_flow_t(solution):
    """d/dt of X_s and Z_s with respect to the starting time (measure moves too)."""
    dX, dZ = particle_sensitivity(solution, -solution.F[0][:, None])
    return dX[:, :, 0], dZ[:, :, 0]


# --------------------------------------------------------------------------
# equilibrium defect


def nash_gap(model, solution):
    """sup over nodes of W1 between the best-response flow and the frozen cloud."""
    s = solution.settings
    sw = kernels.sweeps_for(model, s.use_numba)
    w = np.ascontiguousarray(solution.weights)
    Y, info = sw.frozen_flow(
        np.ascontiguousarray(solution.X[0]), solution.X, solution.F, solution.Z, solution.G,
        solution.alpha, solution.grid.step, w, s.newton_tol, s.newton_max_iter,
    )
    if info[0]:
        _raise_newton(info, " (best response)")
    n = solution.n_points
    weights = solution.initial.weights
    gap = 0.0
    for k in range(Y.shape[0]):
        a = EmpiricalMeasure(Y[k, :n, None], weights, np.zeros((0, 1)))
        b = EmpiricalMeasure(solution.X[k, :n, None], weights, np.zeros((0, 1)))
        gap = max(gap, wasserstein(a, b, 1))
    return gap
