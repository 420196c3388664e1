"""Hot loops of the solver: pointwise Newton, RK4 sweeps and Riccati sweeps.

Two interchangeable implementations live here.  ``_compile_sweeps`` builds
numba closures over a model's kernel functions; ``NumpySweeps`` runs the
same arithmetic vectorised over particles.  ``sweeps_for`` picks one
according to ``MFGFLOW_DISABLE_NUMBA``.

All sweeps work on a uniform grid of ``n_nodes`` nodes and ``n`` particles
(points followed by zero-weight probes).  Off-node values of the coupled
variable are reconstructed by cubic Hermite interpolation from node values
and node slopes, which keeps the scheme fourth order.

Status codes returned in ``info[0]``: 0 ok, 1 Newton hit max_iter or
stalled, 2 Hessian not positive, 3 non-finite iterate.
"""

import numpy as np

from ._numba_settings import numba, numba_cached, numba_default, use_numba

OK, MAX_ITER, NONCONVEX, NONFINITE = 0, 1, 2, 3
STATUS_TEXT = {
    OK: "converged",
    MAX_ITER: "Newton did not reach tolerance",
    NONCONVEX: "Hessian not positive",
    NONFINITE: "non-finite iterate",
}
BISECTION_STEPS = 60


# --------------------------------------------------------------------------
# numpy implementation


def newton_vectorized(kern, x, M, z, a0, p, tol, max_iter):
    """Damped Newton on ``f_a z + g_a = 0`` for every entry of the broadcast.

    Returns (alpha, residual, iterations, hessian, status, damped).
    """
    x, z, a0 = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, z, a0)))
    a = a0.copy()
    scale = np.maximum(1.0, np.abs(z))

    def grad(a):
        return kern.drift_a(x, M, a, p) * z + kern.running_a(x, M, a, p)

    def hess(a):
        return kern.drift_aa(x, M, a, p) * z + kern.running_aa(x, M, a, p)

    F = grad(a) + np.zeros(a.shape)
    H = hess(a) + np.zeros(a.shape)
    iters = np.zeros(a.shape, dtype=np.int64)
    status = np.zeros(a.shape, dtype=np.int64)
    damped = np.zeros(a.shape, dtype=bool)
    active = np.abs(F) > tol * scale
    with np.errstate(all="ignore"):
        while active.any():
            out_of_budget = active & (iters >= max_iter)
            status[out_of_budget] = MAX_ITER
            nonconvex = active & ~out_of_budget & ~(H > 0)
            status[nonconvex] = NONCONVEX
            active &= ~(out_of_budget | nonconvex)
            if not active.any():
                break
            step = np.where(active, F / np.where(active, H, 1.0), 0.0)
            a_new = a - step
            F_new = grad(a_new) + np.zeros(a.shape)
            worse = active & ~(np.abs(F_new) < np.abs(F))
            if worse.any():
                damped |= worse
                lam = np.ones(a.shape)
                a_new = np.where(worse, a, a_new)
                F_new = np.where(worse, F, F_new)
                pending = worse.copy()
                for _ in range(BISECTION_STEPS):
                    lam = np.where(pending, 0.5 * lam, lam)
                    trial = a - lam * step
                    F_trial = grad(trial) + np.zeros(a.shape)
                    better = pending & (np.abs(F_trial) < np.abs(F))
                    a_new = np.where(better, trial, a_new)
                    F_new = np.where(better, F_trial, F_new)
                    pending &= ~better
                    if not pending.any():
                        break
            iters += active
            stalled = active & (a_new == a)
            a = np.where(active, a_new, a)
            F = np.where(active, F_new, F)
            H = np.where(active, hess(a) + np.zeros(a.shape), H)
            bad = active & ~np.isfinite(a)
            status[bad] = NONFINITE
            active &= ~bad
            still = np.abs(F) > tol * scale
            status[active & stalled & still] = MAX_ITER
            active &= ~stalled & still
    return a, np.abs(F), iters, H, status, damped


def _first_failure(status, node):
    bad = np.flatnonzero(status)
    if bad.size == 0:
        return None
    i = bad[0]
    return np.array([status[i], node, i, 0], dtype=np.int64)


class NumpySweeps:
    """Vectorised-over-particles sweeps (the fallback path)."""

    compiled = False

    def __init__(self, model):
        self.kern = model.kernels
        self.p = model.params
        self.n_features = model.n_features

    def moments(self, xs, w):
        return np.stack(np.broadcast_arrays(*self.kern.features(xs, self.p))) @ w

    def _control(self, x, w, z, a, tol, max_iter, node, info):
        M = self.moments(x, w)
        alpha, _, _, _, status, damped = newton_vectorized(self.kern, x, M, z, a, self.p, tol, max_iter)
        fail = _first_failure(status, node)
        if fail is not None and info[0] == OK:
            info[:] = fail
        info[3] += int(damped.sum())
        return alpha, M

    def forward(self, x0, Z, G, A, h, w, tol, max_iter):
        kern, p = self.kern, self.p
        n_nodes, n = Z.shape
        X = np.empty((n_nodes, n))
        F = np.empty((n_nodes, n))
        Aout = np.empty((n_nodes, n))
        info = np.zeros(4, dtype=np.int64)
        X[0] = x0
        for s in range(n_nodes - 1):
            xs = X[s]
            a1, M = self._control(xs, w, Z[s], A[s], tol, max_iter, s, info)
            k1 = kern.drift(xs, M, a1, p) + np.zeros(n)
            zm = 0.5 * (Z[s] + Z[s + 1]) + 0.125 * h * (G[s] - G[s + 1])
            x2 = xs + 0.5 * h * k1
            a2, M = self._control(x2, w, zm, a1, tol, max_iter, s, info)
            k2 = kern.drift(x2, M, a2, p) + np.zeros(n)
            x3 = xs + 0.5 * h * k2
            a3, M = self._control(x3, w, zm, a2, tol, max_iter, s, info)
            k3 = kern.drift(x3, M, a3, p) + np.zeros(n)
            x4 = xs + h * k3
            a4, M = self._control(x4, w, Z[s + 1], A[s + 1], tol, max_iter, s + 1, info)
            k4 = kern.drift(x4, M, a4, p) + np.zeros(n)
            if info[0] != OK:
                return X, F, Aout, info
            Aout[s] = a1
            F[s] = k1
            X[s + 1] = xs + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        last = n_nodes - 1
        a, M = self._control(X[last], w, Z[last], A[last], tol, max_iter, last, info)
        Aout[last] = a
        F[last] = kern.drift(X[last], M, a, p)
        return X, F, Aout, info

    def _costate_rate(self, x, M, z, a):
        kern, p = self.kern, self.p
        return -(kern.drift_x(x, M, a, p) * z + kern.running_x(x, M, a, p)) + np.zeros(x.shape)

    def backward(self, X, F, z_end, A, h, w, tol, max_iter):
        n_nodes, n = X.shape
        Z = np.empty((n_nodes, n))
        G = np.empty((n_nodes, n))
        Aout = np.empty((n_nodes, n))
        info = np.zeros(4, dtype=np.int64)
        Z[-1] = z_end
        for s in range(n_nodes - 2, -1, -1):
            zs = Z[s + 1]
            a1, M = self._control(X[s + 1], w, zs, A[s + 1], tol, max_iter, s + 1, info)
            k1 = self._costate_rate(X[s + 1], M, zs, a1)
            xm = 0.5 * (X[s] + X[s + 1]) + 0.125 * h * (F[s] - F[s + 1])
            Mm = self.moments(xm, w)
            z2 = zs - 0.5 * h * k1
            a2, _ = self._control(xm, w, z2, a1, tol, max_iter, s, info)
            k2 = self._costate_rate(xm, Mm, z2, a2)
            z3 = zs - 0.5 * h * k2
            a3, _ = self._control(xm, w, z3, a2, tol, max_iter, s, info)
            k3 = self._costate_rate(xm, Mm, z3, a3)
            z4 = zs - h * k3
            a4, M = self._control(X[s], w, z4, A[s], tol, max_iter, s, info)
            k4 = self._costate_rate(X[s], M, z4, a4)
            if info[0] != OK:
                return Z, G, Aout, info
            Aout[s + 1] = a1
            G[s + 1] = k1
            Z[s] = zs - h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        a, M = self._control(X[0], w, Z[0], A[0], tol, max_iter, 0, info)
        Aout[0] = a
        G[0] = self._costate_rate(X[0], M, Z[0], a)
        return Z, G, Aout, info

    def rates(self, X, Z, A, w, tol, max_iter):
        """Control, drift and costate rate at every node of a given trajectory."""
        n_nodes, n = X.shape
        Aout = np.empty((n_nodes, n))
        F = np.empty((n_nodes, n))
        G = np.empty((n_nodes, n))
        info = np.zeros(4, dtype=np.int64)
        for s in range(n_nodes):
            a, M = self._control(X[s], w, Z[s], A[s], tol, max_iter, s, info)
            Aout[s] = a
            F[s] = self.kern.drift(X[s], M, a, self.p)
            G[s] = self._costate_rate(X[s], M, Z[s], a)
        return Aout, F, G, info

    def frozen_flow(self, x0, Xcloud, Fcloud, Zcloud, Gcloud, A, h, w, tol, max_iter):
        """Best response of tagged agents against a frozen cloud.

        The measure is read from the frozen cloud (Hermite in time) and the
        feedback control uses the cloud's costate interpolated the same way.
        """
        kern, p = self.kern, self.p
        n_nodes, n = Xcloud.shape
        Y = np.empty((n_nodes, n))
        info = np.zeros(4, dtype=np.int64)
        Y[0] = x0
        for s in range(n_nodes - 1):
            cm = 0.5 * (Xcloud[s] + Xcloud[s + 1]) + 0.125 * h * (Fcloud[s] - Fcloud[s + 1])
            zm = 0.5 * (Zcloud[s] + Zcloud[s + 1]) + 0.125 * h * (Gcloud[s] - Gcloud[s + 1])
            M0, Mm, M1 = self.moments(Xcloud[s], w), self.moments(cm, w), self.moments(Xcloud[s + 1], w)
            stages = ((0.0, M0, Zcloud[s], A[s]), (0.5, Mm, zm, A[s]), (0.5, Mm, zm, A[s]), (1.0, M1, Zcloud[s + 1], A[s + 1]))
            ks = []
            prev = np.zeros(n)
            for frac, M, z, a0 in stages:
                y = Y[s] + frac * h * prev
                a, _, _, _, status, _ = newton_vectorized(kern, y, M, z, a0, p, tol, max_iter)
                fail = _first_failure(status, s)
                if fail is not None:
                    return Y, fail
                prev = kern.drift(y, M, a, p) + np.zeros(n)
                ks.append(prev)
            Y[s + 1] = Y[s] + h / 6.0 * (ks[0] + 2.0 * ks[1] + 2.0 * ks[2] + ks[3])
        return Y, info


# --------------------------------------------------------------------------
# numba implementation: closures compiled once per model family


class CompiledSweeps:
    compiled = True

    def __init__(self, model, fns):
        self.p = model.params
        self.n_features = model.n_features
        self._fns = fns

    def moments(self, xs, w):
        out = np.empty(self.n_features)
        self._fns["moments"](np.ascontiguousarray(xs, dtype=float), w, self.p, out)
        return out

    def forward(self, x0, Z, G, A, h, w, tol, max_iter):
        return self._fns["forward"](x0, Z, G, A, h, w, self.p, tol, max_iter)

    def backward(self, X, F, z_end, A, h, w, tol, max_iter):
        return self._fns["backward"](X, F, z_end, A, h, w, self.p, tol, max_iter)

    def rates(self, X, Z, A, w, tol, max_iter):
        return self._fns["rates"](X, Z, A, w, self.p, tol, max_iter)

    def frozen_flow(self, x0, Xcloud, Fcloud, Zcloud, Gcloud, A, h, w, tol, max_iter):
        return self._fns["frozen_flow"](x0, Xcloud, Fcloud, Zcloud, Gcloud, A, h, w, self.p, tol, max_iter)


def _compile_sweeps(kernels, n_features):
    nj = numba.njit(**numba_default)
    drift, drift_x, drift_a, drift_aa = (nj(kernels.drift), nj(kernels.drift_x),
                                         nj(kernels.drift_a), nj(kernels.drift_aa))
    run_x, run_a, run_aa = nj(kernels.running_x), nj(kernels.running_a), nj(kernels.running_aa)
    features = nj(kernels.features)
    K = n_features

    @nj
    def moments(xs, w, p, out):
        for k in range(K):
            out[k] = 0.0
        for i in range(xs.shape[0]):
            if w[i] != 0.0:
                v = features(xs[i], p)
                for k in range(K):
                    out[k] += w[i] * v[k]

    @nj
    def solve_point(x, M, z, a, p, tol, max_iter):
        scale = max(1.0, abs(z))
        F = drift_a(x, M, a, p) * z + run_a(x, M, a, p)
        H = drift_aa(x, M, a, p) * z + run_aa(x, M, a, p)
        it = 0
        status = 0
        damped = False
        while abs(F) > tol * scale:
            if it >= max_iter:
                status = 1
                break
            if not H > 0.0:
                status = 2
                break
            step = F / H
            a_new = a - step
            F_new = drift_a(x, M, a_new, p) * z + run_a(x, M, a_new, p)
            if not abs(F_new) < abs(F):
                damped = True
                lam = 1.0
                a_new = a
                F_new = F
                for _ in range(60):
                    lam *= 0.5
                    trial = a - lam * step
                    F_trial = drift_a(x, M, trial, p) * z + run_a(x, M, trial, p)
                    if abs(F_trial) < abs(F):
                        a_new = trial
                        F_new = F_trial
                        break
            it += 1
            stalled = a_new == a
            a = a_new
            F = F_new
            H = drift_aa(x, M, a, p) * z + run_aa(x, M, a, p)
            if not np.isfinite(a):
                status = 3
                break
            if stalled and abs(F) > tol * scale:
                status = 1
                break
        return a, status, damped

    @nj
    def control_stage(xs, M_all, zs, warm, p, tol, max_iter, node, alpha, rate, info):
        # one RK stage: Newton at every particle, then the drift
        for i in range(xs.shape[0]):
            a, status, damped = solve_point(xs[i], M_all, zs[i], warm[i], p, tol, max_iter)
            if damped:
                info[3] += 1
            if status != 0 and info[0] == 0:
                info[0] = status
                info[1] = node
                info[2] = i
            alpha[i] = a
            rate[i] = drift(xs[i], M_all, a, p)

    @nj
    def costate_stage(xs, M_all, zs, warm, p, tol, max_iter, node, alpha, rate, info):
        for i in range(xs.shape[0]):
            a, status, damped = solve_point(xs[i], M_all, zs[i], warm[i], p, tol, max_iter)
            if damped:
                info[3] += 1
            if status != 0 and info[0] == 0:
                info[0] = status
                info[1] = node
                info[2] = i
            alpha[i] = a
            rate[i] = -(drift_x(xs[i], M_all, a, p) * zs[i] + run_x(xs[i], M_all, a, p))

    @nj
    def forward(x0, Z, G, A, h, w, p, tol, max_iter):
        n_nodes, n = Z.shape
        X = np.empty((n_nodes, n))
        F = np.empty((n_nodes, n))
        Aout = np.empty((n_nodes, n))
        info = np.zeros(4, dtype=np.int64)
        M = np.empty(K)
        xs = np.empty(n)
        zm = np.empty(n)
        a1 = np.empty(n)
        a2 = np.empty(n)
        a3 = np.empty(n)
        a4 = np.empty(n)
        k1 = np.empty(n)
        k2 = np.empty(n)
        k3 = np.empty(n)
        k4 = np.empty(n)
        X[0, :] = x0
        for s in range(n_nodes - 1):
            moments(X[s], w, p, M)
            control_stage(X[s], M, Z[s], A[s], p, tol, max_iter, s, a1, k1, info)
            for i in range(n):
                zm[i] = 0.5 * (Z[s, i] + Z[s + 1, i]) + 0.125 * h * (G[s, i] - G[s + 1, i])
                xs[i] = X[s, i] + 0.5 * h * k1[i]
            moments(xs, w, p, M)
            control_stage(xs, M, zm, a1, p, tol, max_iter, s, a2, k2, info)
            for i in range(n):
                xs[i] = X[s, i] + 0.5 * h * k2[i]
            moments(xs, w, p, M)
            control_stage(xs, M, zm, a2, p, tol, max_iter, s, a3, k3, info)
            for i in range(n):
                xs[i] = X[s, i] + h * k3[i]
            moments(xs, w, p, M)
            control_stage(xs, M, Z[s + 1], A[s + 1], p, tol, max_iter, s + 1, a4, k4, info)
            if info[0] != 0:
                return X, F, Aout, info
            for i in range(n):
                Aout[s, i] = a1[i]
                F[s, i] = k1[i]
                X[s + 1, i] = X[s, i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        last = n_nodes - 1
        moments(X[last], w, p, M)
        control_stage(X[last], M, Z[last], A[last], p, tol, max_iter, last, a1, k1, info)
        Aout[last, :] = a1
        F[last, :] = k1
        return X, F, Aout, info

    @nj
    def backward(X, F, z_end, A, h, w, p, tol, max_iter):
        n_nodes, n = X.shape
        Z = np.empty((n_nodes, n))
        G = np.empty((n_nodes, n))
        Aout = np.empty((n_nodes, n))
        info = np.zeros(4, dtype=np.int64)
        M = np.empty(K)
        xm = np.empty(n)
        zs = np.empty(n)
        a1 = np.empty(n)
        a2 = np.empty(n)
        a3 = np.empty(n)
        a4 = np.empty(n)
        k1 = np.empty(n)
        k2 = np.empty(n)
        k3 = np.empty(n)
        k4 = np.empty(n)
        Z[n_nodes - 1, :] = z_end
        for s in range(n_nodes - 2, -1, -1):
            moments(X[s + 1], w, p, M)
            costate_stage(X[s + 1], M, Z[s + 1], A[s + 1], p, tol, max_iter, s + 1, a1, k1, info)
            for i in range(n):
                xm[i] = 0.5 * (X[s, i] + X[s + 1, i]) + 0.125 * h * (F[s, i] - F[s + 1, i])
                zs[i] = Z[s + 1, i] - 0.5 * h * k1[i]
            moments(xm, w, p, M)
            costate_stage(xm, M, zs, a1, p, tol, max_iter, s, a2, k2, info)
            for i in range(n):
                zs[i] = Z[s + 1, i] - 0.5 * h * k2[i]
            costate_stage(xm, M, zs, a2, p, tol, max_iter, s, a3, k3, info)
            for i in range(n):
                zs[i] = Z[s + 1, i] - h * k3[i]
            moments(X[s], w, p, M)
            costate_stage(X[s], M, zs, A[s], p, tol, max_iter, s, a4, k4, info)
            if info[0] != 0:
                return Z, G, Aout, info
            for i in range(n):
                Aout[s + 1, i] = a1[i]
                G[s + 1, i] = k1[i]
                Z[s, i] = Z[s + 1, i] - h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        moments(X[0], w, p, M)
        costate_stage(X[0], M, Z[0], A[0], p, tol, max_iter, 0, a1, k1, info)
        Aout[0, :] = a1
        G[0, :] = k1
        return Z, G, Aout, info

    @nj
    def rates(X, Z, A, w, p, tol, max_iter):
        n_nodes, n = X.shape
        Aout = np.empty((n_nodes, n))
        F = np.empty((n_nodes, n))
        G = np.empty((n_nodes, n))
        info = np.zeros(4, dtype=np.int64)
        M = np.empty(K)
        for s in range(n_nodes):
            moments(X[s], w, p, M)
            control_stage(X[s], M, Z[s], A[s], p, tol, max_iter, s, Aout[s], F[s], info)
            for i in range(n):
                G[s, i] = -(drift_x(X[s, i], M, Aout[s, i], p) * Z[s, i] + run_x(X[s, i], M, Aout[s, i], p))
        return Aout, F, G, info

    @nj
    def frozen_flow(x0, Xc, Fc, Zc, Gc, A, h, w, p, tol, max_iter):
        n_nodes, n = Xc.shape
        Y = np.empty((n_nodes, n))
        info = np.zeros(4, dtype=np.int64)
        M0 = np.empty(K)
        Mm = np.empty(K)
        M1 = np.empty(K)
        cm = np.empty(n)
        zm = np.empty(n)
        ys = np.empty(n)
        scratch = np.empty(n)
        k1 = np.empty(n)
        k2 = np.empty(n)
        k3 = np.empty(n)
        k4 = np.empty(n)
        Y[0, :] = x0
        for s in range(n_nodes - 1):
            for i in range(n):
                cm[i] = 0.5 * (Xc[s, i] + Xc[s + 1, i]) + 0.125 * h * (Fc[s, i] - Fc[s + 1, i])
                zm[i] = 0.5 * (Zc[s, i] + Zc[s + 1, i]) + 0.125 * h * (Gc[s, i] - Gc[s + 1, i])
            moments(Xc[s], w, p, M0)
            moments(cm, w, p, Mm)
            moments(Xc[s + 1], w, p, M1)
            control_stage(Y[s], M0, Zc[s], A[s], p, tol, max_iter, s, scratch, k1, info)
            for i in range(n):
                ys[i] = Y[s, i] + 0.5 * h * k1[i]
            control_stage(ys, Mm, zm, A[s], p, tol, max_iter, s, scratch, k2, info)
            for i in range(n):
                ys[i] = Y[s, i] + 0.5 * h * k2[i]
            control_stage(ys, Mm, zm, A[s], p, tol, max_iter, s, scratch, k3, info)
            for i in range(n):
                ys[i] = Y[s, i] + h * k3[i]
            control_stage(ys, M1, Zc[s + 1], A[s + 1], p, tol, max_iter, s + 1, scratch, k4, info)
            if info[0] != 0:
                return Y, info
            for i in range(n):
                Y[s + 1, i] = Y[s, i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        return Y, info

    return {
        "moments": moments,
        "forward": forward,
        "backward": backward,
        "rates": rates,
        "frozen_flow": frozen_flow,
    }


_COMPILED = {}


def sweeps_for(model, numba_enabled=None):
    """Sweep implementation for ``model`` (compiled closures are cached per family)."""
    if numba_enabled is None:
        numba_enabled = use_numba()
    if not numba_enabled:
        return NumpySweeps(model)
    key = (model.family, model.n_features, id(model.kernels))
    if key not in _COMPILED:
        _COMPILED[key] = (model.kernels, _compile_sweeps(model.kernels, model.n_features))
    return CompiledSweeps(model, _COMPILED[key][1])


# --------------------------------------------------------------------------
# Riccati and linear propagation on the particle system.
#
# Coefficients are supplied at nodes (shape (T, ...)) and at interval
# midpoints (shape (T-1, ...)).  The matrix flow is
#   P' = -C - D P - P A - P B P,
#   A = diag(a) + UF @ Psi,  B = diag(b),  C = diag(c) + UG @ Psi,  D = diag(d).


def _riccati_rate_np(P, a, b, c, d, UF, UG, Psi):
    out = -(UG @ Psi)
    out[np.diag_indices_from(out)] -= c
    out -= d[:, None] * P + P * a[None, :]
    out -= (P @ UF) @ Psi
    out -= (P * b[None, :]) @ P
    return out


def riccati_backward_numpy(PT, h, node, mid, store=True):
    """RK4 backward sweep; ``node``/``mid`` are tuples (a, b, c, d, UF, UG, Psi)."""
    n_nodes = node[0].shape[0]
    n = PT.shape[0]
    Ps = np.empty((n_nodes, n, n)) if store else None
    dPs = np.empty((n_nodes, n, n)) if store else None
    P = PT.copy()
    for s in range(n_nodes - 2, -1, -1):
        at_hi = tuple(arr[s + 1] for arr in node)
        at_mid = tuple(arr[s] for arr in mid)
        at_lo = tuple(arr[s] for arr in node)
        k1 = _riccati_rate_np(P, *at_hi)
        if store:
            Ps[s + 1] = P
            dPs[s + 1] = k1
        k2 = _riccati_rate_np(P - 0.5 * h * k1, *at_mid)
        k3 = _riccati_rate_np(P - 0.5 * h * k2, *at_mid)
        k4 = _riccati_rate_np(P - h * k3, *at_lo)
        P = P - h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if store:
        Ps[0] = P
        dPs[0] = _riccati_rate_np(P, *(arr[0] for arr in node))
    return P, Ps, dPs


def _linear_rate_np(P, V, a, b, UF, Psi):
    return a[:, None] * V + UF @ (Psi @ V) + b[:, None] * (P @ V)


def propagate_numpy(V0, h, Ps, dPs, node, mid):
    """Forward RK4 for V' = (A + B P) V; ``node``/``mid`` are (a, b, UF, Psi)."""
    n_nodes = Ps.shape[0]
    out = np.empty((n_nodes,) + V0.shape)
    V = V0.copy()
    out[0] = V
    for s in range(n_nodes - 1):
        Pm = 0.5 * (Ps[s] + Ps[s + 1]) + 0.125 * h * (dPs[s] - dPs[s + 1])
        lo = tuple(arr[s] for arr in node)
        md = tuple(arr[s] for arr in mid)
        hi = tuple(arr[s + 1] for arr in node)
        k1 = _linear_rate_np(Ps[s], V, *lo)
        k2 = _linear_rate_np(Pm, V + 0.5 * h * k1, *md)
        k3 = _linear_rate_np(Pm, V + 0.5 * h * k2, *md)
        k4 = _linear_rate_np(Ps[s + 1], V + h * k3, *hi)
        V = V + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[s + 1] = V
    return out


def scalar_riccati_numpy(qT, h, node, mid):
    """Per-particle scalar Riccati q' = -c - d q - q a - b q^2, backward.

    ``node``/``mid`` are (a, b, c, d) arrays.  Returns q and q' at nodes.
    """
    n_nodes = node[0].shape[0]

    def rate(q, a, b, c, d):
        return -c - d * q - q * a - b * q * q

    q = np.asarray(qT, dtype=float).copy()
    Q = np.empty((n_nodes,) + q.shape)
    dQ = np.empty_like(Q)
    for s in range(n_nodes - 2, -1, -1):
        k1 = rate(q, *(arr[s + 1] for arr in node))
        Q[s + 1], dQ[s + 1] = q, k1
        md = tuple(arr[s] for arr in mid)
        k2 = rate(q - 0.5 * h * k1, *md)
        k3 = rate(q - 0.5 * h * k2, *md)
        k4 = rate(q - h * k3, *(arr[s] for arr in node))
        q = q - h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    Q[0] = q
    dQ[0] = rate(q, *(arr[0] for arr in node))
    return Q, dQ


def scalar_propagate_numpy(v0, h, Q, dQ, node, mid):
    """Forward RK4 for v' = (a + b q) v with Hermite-interpolated q."""
    n_nodes = Q.shape[0]
    out = np.empty_like(Q)
    v = np.asarray(v0, dtype=float).copy()
    out[0] = v
    for s in range(n_nodes - 1):
        qm = 0.5 * (Q[s] + Q[s + 1]) + 0.125 * h * (dQ[s] - dQ[s + 1])
        a0, b0 = node[0][s], node[1][s]
        am, bm = mid[0][s], mid[1][s]
        a1, b1 = node[0][s + 1], node[1][s + 1]
        k1 = (a0 + b0 * Q[s]) * v
        k2 = (am + bm * qm) * (v + 0.5 * h * k1)
        k3 = (am + bm * qm) * (v + 0.5 * h * k2)
        k4 = (a1 + b1 * Q[s + 1]) * (v + h * k3)
        v = v + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[s + 1] = v
    return out


if numba is not None:

    @numba.njit(**numba_cached)
    def _riccati_rate_nb(P, a, b, c, d, UF, UG, Psi, out):
        n = P.shape[0]
        coupling = np.dot(UG, Psi) + np.dot(np.dot(P, UF), Psi)
        PB = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                PB[i, j] = P[i, j] * b[j]
        quad = np.dot(PB, P)
        for i in range(n):
            for j in range(n):
                out[i, j] = -coupling[i, j] - d[i] * P[i, j] - P[i, j] * a[j] - quad[i, j]
            out[i, i] -= c[i]

    @numba.njit(**numba_cached)
    def _riccati_backward_nb(PT, h, na, nb, nc, nd, nUF, nUG, nPsi, ma, mb, mc, md, mUF, mUG, mPsi, store):
        n_nodes = na.shape[0]
        n = PT.shape[0]
        depth = n_nodes if store else 1
        Ps = np.zeros((depth, n, n))
        dPs = np.zeros((depth, n, n))
        P = PT.copy()
        k1 = np.empty((n, n))
        k2 = np.empty((n, n))
        k3 = np.empty((n, n))
        k4 = np.empty((n, n))
        for s in range(n_nodes - 2, -1, -1):
            _riccati_rate_nb(P, na[s + 1], nb[s + 1], nc[s + 1], nd[s + 1], nUF[s + 1], nUG[s + 1], nPsi[s + 1], k1)
            if store:
                Ps[s + 1] = P
                dPs[s + 1] = k1
            _riccati_rate_nb(P - 0.5 * h * k1, ma[s], mb[s], mc[s], md[s], mUF[s], mUG[s], mPsi[s], k2)
            _riccati_rate_nb(P - 0.5 * h * k2, ma[s], mb[s], mc[s], md[s], mUF[s], mUG[s], mPsi[s], k3)
            _riccati_rate_nb(P - h * k3, na[s], nb[s], nc[s], nd[s], nUF[s], nUG[s], nPsi[s], k4)
            P = P - h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if store:
            Ps[0] = P
            _riccati_rate_nb(P, na[0], nb[0], nc[0], nd[0], nUF[0], nUG[0], nPsi[0], k1)
            dPs[0] = k1
        return P, Ps, dPs

    @numba.njit(**numba_cached)
    def _linear_rate_nb(P, V, a, b, UF, Psi):
        out = np.dot(UF, np.dot(Psi, V)) + np.dot(P, V) * b.reshape(-1, 1)
        for i in range(V.shape[0]):
            for j in range(V.shape[1]):
                out[i, j] += a[i] * V[i, j]
        return out

    @numba.njit(**numba_cached)
    def _propagate_nb(V0, h, Ps, dPs, na, nb, nUF, nPsi, ma, mb, mUF, mPsi):
        n_nodes = Ps.shape[0]
        out = np.empty((n_nodes, V0.shape[0], V0.shape[1]))
        V = V0.copy()
        out[0] = V
        for s in range(n_nodes - 1):
            Pm = 0.5 * (Ps[s] + Ps[s + 1]) + 0.125 * h * (dPs[s] - dPs[s + 1])
            k1 = _linear_rate_nb(Ps[s], V, na[s], nb[s], nUF[s], nPsi[s])
            k2 = _linear_rate_nb(Pm, V + 0.5 * h * k1, ma[s], mb[s], mUF[s], mPsi[s])
            k3 = _linear_rate_nb(Pm, V + 0.5 * h * k2, ma[s], mb[s], mUF[s], mPsi[s])
            k4 = _linear_rate_nb(Ps[s + 1], V + h * k3, na[s + 1], nb[s + 1], nUF[s + 1], nPsi[s + 1])
            V = V + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            out[s + 1] = V
        return out


def _contiguous(arrays):
    return tuple(np.ascontiguousarray(a, dtype=float) for a in arrays)


def riccati_backward(PT, h, node, mid, store=True, numba_enabled=None):
    if numba_enabled is None:
        numba_enabled = use_numba()
    if not numba_enabled:
        return riccati_backward_numpy(PT, h, node, mid, store)
    P, Ps, dPs = _riccati_backward_nb(np.ascontiguousarray(PT, dtype=float), float(h),
                                      *_contiguous(node), *_contiguous(mid), bool(store))
    return (P, Ps, dPs) if store else (P, None, None)


def propagate(V0, h, Ps, dPs, node, mid, numba_enabled=None):
    if numba_enabled is None:
        numba_enabled = use_numba()
    if not numba_enabled:
        return propagate_numpy(V0, h, Ps, dPs, node, mid)
    return _propagate_nb(np.ascontiguousarray(V0, dtype=float), float(h),
                         np.ascontiguousarray(Ps), np.ascontiguousarray(dPs),
                         *_contiguous(node), *_contiguous(mid))
