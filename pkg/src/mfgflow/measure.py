"""Empirical probability measures carried as weighted particle clouds.

A measure holds ``points`` with ``weights`` plus optional zero-weight
``probes``.  Probes move with push-forwards but never enter an integral,
which is how off-cloud evaluation points are threaded through the solver.
"""

from dataclasses import dataclass
import io

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import UnsupportedTransport

ASSIGNMENT_CAP = 512


def _as_cloud(values, d=None):
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if d in (None, 1) else arr.reshape(-1, d)
    return arr


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    points: np.ndarray
    weights: np.ndarray
    probes: np.ndarray

    def __post_init__(self):
        pts = _as_cloud(self.points)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        d = pts.shape[1]
        prb = np.asarray(self.probes, dtype=float)
        prb = prb.reshape(-1, d) if prb.size else np.zeros((0, d))
        if pts.shape[0] == 0:
            raise ValueError("a measure needs at least one point")
        if w.shape[0] != pts.shape[0]:
            raise ValueError("points and weights must have equal length")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        for arr in (pts, w, prb):
            arr.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "probes", prb)

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def n_probes(self):
        return self.probes.shape[0]

    def all_positions(self):
        """Points followed by probes, shape (size + n_probes, dim)."""
        return np.vstack([self.points, self.probes])

    def all_weights(self):
        return np.concatenate([self.weights, np.zeros(self.n_probes)])

    def with_probes(self, probes):
        return EmpiricalMeasure(self.points, self.weights, _as_cloud(probes, self.dim))

    def without_probes(self):
        return EmpiricalMeasure(self.points, self.weights, np.zeros((0, self.dim)))

    def is_uniform(self):
        return bool(np.all(self.weights == self.weights[0]))

    def __eq__(self, other):
        if not isinstance(other, EmpiricalMeasure):
            return NotImplemented
        return (
            np.array_equal(self.points, other.points)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.probes, other.probes)
        )

    __hash__ = None


def uniform(points, probes=None):
    pts = _as_cloud(points)
    n = pts.shape[0]
    prb = np.zeros((0, pts.shape[1])) if probes is None else _as_cloud(probes, pts.shape[1])
    return EmpiricalMeasure(pts, np.full(n, 1.0 / n), prb)


def dirac(x, probes=None):
    return uniform(np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1), probes)


def gaussian(mean, std, n, seed, probes=None):
    """n i.i.d. normal samples in one dimension with uniform weights."""
    rng = np.random.default_rng(seed)
    return uniform(mean + std * rng.standard_normal(int(n)), probes)


def push_forward(mu, fmap):
    """Image measure of ``mu`` under ``fmap``; probes are mapped too."""
    pts = _as_cloud(fmap(mu.points), mu.dim)
    prb = _as_cloud(fmap(mu.probes), mu.dim) if mu.n_probes else mu.probes
    return EmpiricalMeasure(pts, mu.weights, prb)


def moment(mu, p=1.0):
    """(sum_i w_i |x_i|^p)^(1/p) with the Euclidean norm on points."""
    if p < 1:
        raise ValueError("moment order must be >= 1")
    norms = np.linalg.norm(mu.points, axis=1)
    return float(np.dot(mu.weights, norms**p) ** (1.0 / p))


def _quantile_distance(x, wx, y, wy, p):
    ix = np.argsort(x, kind="stable")
    iy = np.argsort(y, kind="stable")
    xs, ys = x[ix], y[iy]
    cx = np.cumsum(wx[ix])
    cy = np.cumsum(wy[iy])
    cx[-1] = cy[-1] = 1.0
    levels = np.union1d(cx, cy)
    du = np.diff(np.concatenate([[0.0], levels]))
    # quantile index for the slab ending at each level
    qx = np.minimum(np.searchsorted(cx, levels - 0.5 * du, side="left"), len(xs) - 1)
    qy = np.minimum(np.searchsorted(cy, levels - 0.5 * du, side="left"), len(ys) - 1)
    return float(np.dot(du, np.abs(xs[qx] - ys[qy]) ** p) ** (1.0 / p))


def wasserstein(mu, nu, p=1, cap=ASSIGNMENT_CAP):
    """Exact W_p between two empirical measures (p in {1, 2})."""
    if p not in (1, 2):
        raise ValueError("p must be 1 or 2")
    if mu.dim != nu.dim:
        raise ValueError("measures live in different dimensions")
    if mu.dim == 1:
        return _quantile_distance(mu.points[:, 0], mu.weights, nu.points[:, 0], nu.weights, p)
    if mu.size != nu.size or not (mu.is_uniform() and nu.is_uniform()):
        raise UnsupportedTransport("d > 1 transport needs equal-size uniform clouds")
    if mu.size > cap:
        raise UnsupportedTransport(f"support size {mu.size} exceeds assignment cap {cap}")
    diff = mu.points[:, None, :] - nu.points[None, :, :]
    cost = np.linalg.norm(diff, axis=2) ** p
    rows, cols = linear_sum_assignment(cost)
    return float((cost[rows, cols].sum() / mu.size) ** (1.0 / p))


def to_csv(mu):
    """Serialise as ``kind,w,x_1..x_d`` rows with 17 significant digits."""
    buf = io.StringIO()
    cols = ",".join(f"x_{k + 1}" for k in range(mu.dim))
    buf.write(f"kind,w,{cols}\n")
    for w, x in zip(mu.weights, mu.points):
        buf.write("point," + ",".join(f"{v:.17g}" for v in (w, *x)) + "\n")
    for x in mu.probes:
        buf.write("probe," + ",".join(f"{v:.17g}" for v in (0.0, *x)) + "\n")
    return buf.getvalue()


def from_csv(text):
    pts, wts, prb = [], [], []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("kind"):
            continue
        kind, w, *xs = line.split(",")
        if kind == "point":
            pts.append([float(v) for v in xs])
            wts.append(float(w))
        elif kind == "probe":
            prb.append([float(v) for v in xs])
        else:
            raise ValueError(f"unknown row kind {kind!r}")
    d = len(pts[0]) if pts else 1
    return EmpiricalMeasure(np.array(pts), np.array(wts), np.array(prb).reshape(-1, d))
