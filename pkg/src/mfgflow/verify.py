"""Constant cascade of the a priori estimate and the structural audit of a model."""

from dataclasses import asdict, dataclass
import math
from typing import NamedTuple

import numpy as np

from .errors import H2SufficientConditionFails


@dataclass(frozen=True)
class ConstantCascade:
    """Closed-form chain of constants, from the h2 construction to k0.

    ``lstar0`` bounds the Lipschitz size of the decoupling field and
    ``k0 = 4 max(Lambda_k, lstar0)`` sets the cone.  ``hamiltonian_bound``
    is the upper bound Lambda_g + min(lambda_1, lambda_g) / 20 used in place
    of the k0-dependent raw definition.
    """

    theta: float
    lambda_1: float
    lambda_2: float
    lambda_z: float
    lambda_x: float
    eps_1: float
    eps_2: float
    lambda_k_bar: float
    lambda_z_bar: float
    lambda_x_bar: float
    hamiltonian_bound: float
    lstar1: float
    lstar2: float
    lstar3: float
    lstar4: float
    lstar5: float
    lstar6: float
    lstar0: float
    k0: float
    L_f: float
    L_g: float
    L_k: float
    L_alpha: float
    L_p: float
    L_p_bar: float
    L_B: float
    L_B_bar: float
    L_B_prime: float

    def as_dict(self):
        return asdict(self)

    def L_M(self, tau):
        """Growth factor of the measure-derivative bounds over a span ``tau``."""
        b = self.L_B_prime * tau
        return b * (b * math.exp(2 * b) + 1) * math.exp(2 * b)


def h2_construction(c):
    """theta, lambda_1, lambda_2 from the sufficient condition, or raise."""
    lambda_z = c.drift_control_lower**2 / (c.running_bound + c.running_convexity / 20)
    lhs = (c.drift_measure_bound + 0.25 * c.drift_control_bound) ** 2
    rhs = 4 * (c.running_convexity - c.running_monotone_defect) * lambda_z
    if not lhs < rhs:
        raise H2SufficientConditionFails(f"(Lambda_2 + Lambda_1/4)^2 = {lhs:.6g} >= {rhs:.6g}")
    theta = math.sqrt(lhs / rhs)
    lambda_1 = (1 - theta) * (c.running_convexity - c.running_monotone_defect)
    lambda_2 = (1 - theta) * lambda_z
    return theta, lambda_1, lambda_2


def origin_values(model):
    """Coefficient data at (0, delta_0, 0) used by the linear-growth constants."""
    from .control import solve_control
    from .measure import dirac

    delta = dirac(0.0)
    return {
        "drift": float(model.drift(0.0, delta, 0.0)),
        "running_x": float(model.evaluate("running_x", 0.0, delta, 0.0)),
        "running_a": float(model.evaluate("running_a", 0.0, delta, 0.0)),
        "terminal_x": float(model.evaluate("terminal_x", 0.0, delta)),
        "alpha_hat": solve_control(model, 0.0, delta, 0.0).alpha_hat,
    }


def compute_cascade(model, lambda_1=None, lambda_2=None, origin=None):
    """Evaluate the whole constant chain for a model's declared constants.

    ``lambda_1``/``lambda_2`` override the sufficient-condition construction
    for models whose h2 form is known by other means (then theta is 0).
    """
    c = model.constants
    lg, Lg = c.running_convexity, c.running_bound
    lk, Lk, dk = c.terminal_convexity, c.terminal_bound, c.terminal_monotone_defect
    Lf = c.drift_bound
    if lambda_1 is None or lambda_2 is None:
        theta, lam1, lam2 = h2_construction(c)
    else:
        theta, lam1, lam2 = 0.0, float(lambda_1), float(lambda_2)

    lambda_z = c.drift_control_lower**2 / (Lg + lg / 20)
    lambda_x = 0.8 * lg
    eps_1 = min(0.5 * (lk - dk), 0.5 * lam2, 0.4 * lam1)
    lk_bar, lz_bar, lx_bar = 0.5 * (lk - dk), 0.5 * lam2, 0.4 * lam1
    eps_2 = min(0.25 * lk, 0.25 * lambda_z, 0.125 * lg)
    Lh = Lg + min(lam1, lg) / 20

    l1 = max(Lk**2 / lk, (Lh + lg / 20) / lambda_z, (2.5 * Lf + Lh + lg / 20) / lambda_x)
    l2 = max(6 * Lk**2 / lk_bar, (2 * Lg + lg / 10) / lx_bar, (1.25 * Lf + 3 * Lg + 0.3 * lg) / lz_bar)
    cross = 25 / 16 * Lf**2 + (Lg + lg / 10) ** 2
    l3 = max((3 + l2 / (4 * eps_1)) * Lk**2 / lk, (Lg + lg / 10 + l2 / (4 * eps_1) * cross) / lambda_x)
    l4 = max(Lk**2 / (4 * eps_1 * lk), cross / (4 * eps_1 * lambda_x))
    l5 = max(Lk**2 / (4 * eps_2 * lk_bar), (25 / 16 * Lf**2 + lg**2 / 400) / (4 * eps_2 * lx_bar))
    l6 = max(
        6 * Lk**2 / lk,
        2 * (1.25 * Lf + 3 * Lg + 0.3 * lg) / lambda_z,
        2 * (Lg + lg / 10) / lg,
        3 * Lk**2 / lk_bar,
        (Lg + lg / 10) / lx_bar,
        3 * Lk**2 / lk,
        (Lg + lg / 10) / lambda_x,
    )
    l0 = model.d_x * max(l1, math.sqrt((l4 * (2 + l5) + 1) * l1 * l6))
    k0 = 4 * max(Lk, l0)

    origin = origin_values(model) if origin is None else origin
    L_f = max(Lf, abs(origin["drift"]))
    L_g = max(abs(origin["running_x"]), abs(origin["running_a"]), Lg, c.running_cross_bound)
    L_k = max(abs(origin["terminal_x"]), Lk)
    L_alpha = max(
        20 * Lf / (19 * lg),
        20 * (c.running_cross_bound + 0.5 * k0 * c.drift_curvature) / (19 * lg),
        abs(origin["alpha_hat"]),
    )
    L_p = Lk
    L_p_bar = max(abs(origin["terminal_x"]), Lk)
    return ConstantCascade(
        theta=theta, lambda_1=lam1, lambda_2=lam2, lambda_z=lambda_z, lambda_x=lambda_x,
        eps_1=eps_1, eps_2=eps_2, lambda_k_bar=lk_bar, lambda_z_bar=lz_bar, lambda_x_bar=lx_bar,
        hamiltonian_bound=Lh, lstar1=l1, lstar2=l2, lstar3=l3, lstar4=l4, lstar5=l5, lstar6=l6,
        lstar0=l0, k0=k0, L_f=L_f, L_g=L_g, L_k=L_k, L_alpha=L_alpha, L_p=L_p, L_p_bar=L_p_bar,
        L_B=L_f * (1 + L_alpha + 2 * L_p * L_alpha),
        L_B_bar=L_f * (1 + L_alpha + 2 * L_p_bar * L_alpha),
        L_B_prime=Lf * (1 + L_alpha + l0 * L_alpha),
    )


# --------------------------------------------------------------------------
# structural audit

PASS, FAIL, SAMPLED_PASS = "pass", "fail", "sampled-pass"
IDENTITY_TOL = 1e-10


@dataclass
class CheckRecord:
    name: str
    status: str
    value: float
    bound: float
    witness: dict | None = None
    samples: int = 0
    note: str = ""

    def as_dict(self):
        return asdict(self)


@dataclass
class AuditReport:
    model: str
    sample_budget: int
    box: dict
    checks: list

    @property
    def passed(self):
        return all(c.status != FAIL for c in self.checks)

    def failures(self):
        return [c for c in self.checks if c.status == FAIL]

    def as_dict(self):
        return {
            "model": self.model, "sample_budget": self.sample_budget, "box": self.box,
            "passed": self.passed, "checks": [c.as_dict() for c in self.checks],
        }

    def to_text(self):
        lines = [f"audit of model '{self.model}' ({self.sample_budget} samples per sampled check)"]
        for c in self.checks:
            line = f"  [{c.status:>12}] {c.name}: value {c.value:.6g} vs bound {c.bound:.6g}"
            if c.note:
                line += f"  ({c.note})"
            lines.append(line)
            if c.status == FAIL and c.witness:
                lines.append(f"      witness: {c.witness}")
        lines.append("overall: " + ("pass" if self.passed else "FAIL"))
        return "\n".join(lines)


DEFAULT_BOX = {"x": 5.0, "first_moment": 5.0, "alpha": 5.0}


class _Draws(NamedTuple):
    """Sampled points with two-point measures mu = q delta_y1 + (1 - q) delta_y2."""

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray  # (2, n)
    q: np.ndarray
    probe: np.ndarray  # the point at which measure derivatives are read
    u: np.ndarray  # cone fraction in [-1, 1]
    y_alt: np.ndarray  # support of the second measure for monotonicity checks
    q_alt: np.ndarray


def _draw(n, box):
    from .sampling import sobol_box

    bx, bm, ba = box["x"], box["first_moment"], box["alpha"]
    lo = [-bx, -ba, -bm, -bm, 0.0, -bm, -1.0, -bm, -bm, 0.0]
    hi = [bx, ba, bm, bm, 1.0, bm, 1.0, bm, bm, 1.0]
    s = sobol_box(lo, hi, n).T
    return _Draws(s[0], s[1], s[2:4], s[4], s[5], s[6], s[7:9], s[9])


def _two_point(model, y, q):
    vals = model.feature_values(y)  # (K, 2, n)
    return q * vals[:, 0] + (1 - q) * vals[:, 1]


def _first_moment(y, q):
    return q * np.abs(y[0]) + (1 - q) * np.abs(y[1])


def _mu_slope(model, name, x, M, a, y):
    return np.sum(model.raw(name, x, M, a) * model.feature_slopes(y), axis=0)


def _witness(d, i, **extra):
    out = {"x": float(d.x[i]), "alpha": float(d.a[i]), "support": [float(d.y[0, i]), float(d.y[1, i])],
           "weight": float(d.q[i]), "y": float(d.probe[i])}
    out.update({k: float(np.asarray(v)[i]) for k, v in extra.items()})
    return out


def _sup_check(name, values, bound, d, note=""):
    i = int(np.argmax(values))
    v = float(values[i])
    status = SAMPLED_PASS if v <= bound else FAIL
    return CheckRecord(name, status, v, float(bound), _witness(d, i) if status == FAIL else None, values.size, note)


def _inf_check(name, values, bound, d, note=""):
    i = int(np.argmin(values))
    v = float(values[i])
    status = SAMPLED_PASS if v >= bound else FAIL
    return CheckRecord(name, status, v, float(bound), _witness(d, i) if status == FAIL else None, values.size, note)


def _exact_check(name, value, bound, ok, witness=None, note=""):
    return CheckRecord(name, PASS if ok else FAIL, float(value), float(bound), None if ok else witness, 0, note)


def _monotone_gap(model, name, d, M, M_alt, with_control):
    """int (c(., mu') - c(., mu)) d(mu' - mu) for the two-point measures of each sample."""

    def cost(pts, moments):
        if with_control:
            return model.raw(name, pts, moments, d.a)
        return model.raw(name, pts, moments)

    gap = 0.0
    for pts, wts, sign in ((d.y_alt, (d.q_alt, 1 - d.q_alt), 1.0), (d.y, (d.q, 1 - d.q), -1.0)):
        for k in range(2):
            gap = gap + sign * wts[k] * (cost(pts[k], M_alt) - cost(pts[k], M))
    shift = (d.q * d.y[0] + (1 - d.q) * d.y[1]) - (d.q_alt * d.y_alt[0] + (1 - d.q_alt) * d.y_alt[1])
    return gap, shift**2


def _cloud_bilinear(model, name, X, Xt, M, a):
    """sum_{i,j} w_i w_j Xt_i d_mu d_x c(X_i, mu, a_i)(X_j) Xt_j for uniform clouds (n_clouds, n)."""
    n = X.shape[1]
    grads = model.raw(name, X, M[:, :, None], a)  # (K, clouds, n)
    slopes = model.feature_slopes(X)  # (K, clouds, n)
    kernel = np.einsum("kci,kcj->cij", grads, slopes)
    return np.einsum("ci,cij,cj->c", Xt, kernel, Xt) / n**2


def _h2_sampled(model, cascade, n_clouds, cloud_size=4):
    """Sampled value of the measure-monotonicity form of the Hamiltonian minus its right side, on cone clouds."""
    from .control import cone_bound
    from .sampling import sobol_box

    b = DEFAULT_BOX["x"]
    n = cloud_size
    s = sobol_box([-b] * n + [-1.0] * n + [-1.0] * (2 * n), [b] * n + [1.0] * n + [1.0] * (2 * n), n_clouds)
    X, U, Xt, Zt = s[:, :n], s[:, n : 2 * n], s[:, 2 * n : 3 * n], s[:, 3 * n :]
    M = model.feature_values(X).mean(axis=-1)  # (K, clouds)
    mass = np.abs(X).mean(axis=1, keepdims=True)
    Z = U * cone_bound(cascade.k0, X, mass)
    Mb = np.broadcast_to(M[:, :, None], M.shape + (n,)).reshape(M.shape[0], -1)
    alpha, H, status = _cone_solve(model, X.ravel(), Mb, Z.ravel())
    if np.any(status):
        i = int(np.flatnonzero(status)[0])
        return None, {"x": float(X.ravel()[i]), "z": float(Z.ravel()[i]), "status": int(status[i])}
    alpha, H = alpha.reshape(X.shape), H.reshape(X.shape)
    Mc = M[:, :, None]
    f_a = model.raw("drift_a", X, Mc, alpha)
    slopes = model.feature_slopes(X)  # (K, clouds, n) at the tilde points
    # d_mu d_z h (X_i)(X_j) = d_mu f + f_a d_mu alpha_hat, alpha_hat slope from the first-order condition
    df = model.raw("drift_m", X, Mc, alpha)
    dfa = model.raw("drift_am", X, Mc, alpha)
    dga = model.raw("running_am", X, Mc, alpha)
    grad_k = df - f_a * (dfa * Z + dga) / H  # (K, clouds, n)
    cross = np.einsum("kci,kcj->cij", grad_k, slopes)
    cross_form = np.einsum("ci,cij,cj->c", Zt, cross, Xt) / n**2
    zz = -f_a * f_a / H
    c = model.constants
    xt2 = np.mean(Xt**2, axis=1)
    zt2 = np.mean(Zt**2, axis=1)
    lhs = (c.running_convexity - c.running_monotone_defect) * xt2 - cross_form - np.mean(zz * Zt**2, axis=1)
    size = xt2 + zt2
    keep = size > 0
    return (lhs - cascade.lambda_1 * xt2 - cascade.lambda_2 * zt2)[keep] / size[keep], None


def _cone_solve(model, x, M, z):
    from .kernels import newton_vectorized

    alpha, _, _, H, status, _ = newton_vectorized(model.kernels, x, M, z, 0.0, model.params, 1e-12, 50)
    return alpha, H, status


def audit_assumptions(model, sample_budget=1024, box=None, cascade=None):
    """Audit every structural assumption of ``model``.

    Closed-form conditions are checked exactly.  Sup/inf conditions are
    checked on deterministic Sobol samples and can only ever report
    "sampled-pass": a falsification test, never a proof.
    """
    from .control import cone_bound

    box = dict(DEFAULT_BOX if box is None else box)
    c = model.constants
    checks = []
    d = _draw(int(sample_budget), box)
    M = _two_point(model, d.y, d.q)
    M_alt = _two_point(model, d.y_alt, d.q_alt)
    mass = _first_moment(d.y, d.q)
    x, a, yt = d.x, d.a, d.probe
    grow = 1 + np.abs(x) + mass

    # (a1) drift
    f_a = model.raw("drift_a", x, M, a)
    checks.append(_inf_check("a1.i drift control coercivity |f_a|^2 - lambda_f^2", f_a**2 - c.drift_control_lower**2, 0.0, d))
    checks.append(_sup_check("a1.ii |f_a| <= Lambda_1", np.abs(f_a), c.drift_control_bound, d))
    checks.append(_sup_check("a1.ii |d_mu f| <= Lambda_2", np.abs(_mu_slope(model, "drift_m", x, M, a, yt)),
                             c.drift_measure_bound, d))
    checks.append(_sup_check("a1.ii |f_x| <= Lambda_3", np.abs(model.raw("drift_x", x, M, a)), c.drift_state_bound, d))
    second = np.max(np.abs(np.stack([
        model.raw("drift_aa", x, M, a), model.raw("drift_xa", x, M, a), model.raw("drift_xx", x, M, a),
        _mu_slope(model, "drift_am", x, M, a, yt), _mu_slope(model, "drift_xm", x, M, a, yt),
    ])), axis=0)
    checks.append(_sup_check("a1.iii second derivatives x growth <= lbar_f", second * grow, c.drift_curvature, d))

    # (a2) running cost
    checks.append(_inf_check("a2.i g_aa >= lambda_g", model.raw("running_aa", x, M, a), c.running_convexity, d))
    checks.append(_inf_check("a2.ii.a g_xx >= lambda_g", model.raw("running_xx", x, M, a), c.running_convexity, d))
    gap, shift2 = _monotone_gap(model, "running", d, M, M_alt, True)
    checks.append(_inf_check("a2.ii.b measure monotonicity gap + l_g shift^2", gap + c.running_monotone_defect * shift2,
                             0.0, d))
    if model.exact_monotone:
        resid = np.abs(gap + c.running_monotone_defect * shift2)
        checks.append(_sup_check("a2.ii.b exact monotonicity identity", resid, IDENTITY_TOL, d,
                                 "gap equals -l_g (shift of means)^2"))
    checks.append(_cloud_check(model, "running_xm", c.running_monotone_defect, sample_budget, box, with_control=True))
    bound_a = np.max(np.abs(np.stack([
        model.raw("running_aa", x, M, a), model.raw("running_xx", x, M, a), _mu_slope(model, "running_xm", x, M, a, yt),
    ])), axis=0)
    checks.append(_sup_check("a2.iii.a second derivatives <= Lambda_g", bound_a, c.running_bound, d))
    bound_b = np.maximum(np.abs(model.raw("running_xa", x, M, a)), np.abs(_mu_slope(model, "running_am", x, M, a, yt)))
    checks.append(_sup_check("a2.iii.b cross derivatives <= lbar_g", bound_b, c.running_cross_bound, d))

    # (a3) terminal cost
    checks.append(_inf_check("a3.i.a k_xx >= lambda_k", model.raw("terminal_xx", x, M), c.terminal_convexity, d))
    gap, shift2 = _monotone_gap(model, "terminal", d, M, M_alt, False)
    checks.append(_inf_check("a3.i.b measure monotonicity gap + l_k shift^2", gap + c.terminal_monotone_defect * shift2,
                             0.0, d))
    if model.exact_monotone:
        resid = np.abs(gap + c.terminal_monotone_defect * shift2)
        checks.append(_sup_check("a3.i.b exact monotonicity identity", resid, IDENTITY_TOL, d,
                                 "gap equals -l_k (shift of means)^2"))
    checks.append(_cloud_check(model, "terminal_xm", c.terminal_monotone_defect, sample_budget, box, with_control=False))
    bound_k = np.maximum(np.abs(model.raw("terminal_xx", x, M)), np.abs(_mu_slope(model, "terminal_xm", x, M, None, yt)))
    checks.append(_sup_check("a3.ii second derivatives <= Lambda_k", bound_k, c.terminal_bound, d))

    # (h1) exact at the origin
    checks.append(_h1_check(model))

    # (h2) sufficient condition, then the cascade it unlocks
    try:
        theta, lam1, lam2 = h2_construction(c)
        checks.append(_exact_check("h2 sufficient condition theta < 1", theta, 1.0, True))
    except H2SufficientConditionFails as err:
        checks.append(_exact_check("h2 sufficient condition theta < 1", np.inf, 1.0, False, {"reason": str(err)}))
        return AuditReport(model.name, int(sample_budget), box, checks)
    if cascade is None:
        cascade = compute_cascade(model)
    if model.separable:
        checks[-1].note = "separable Hamiltonian: measure-costate coupling vanishes, so the form also holds with lambda_1 = lambda_g - l_g"
    form, failed = _h2_sampled(model, cascade, int(sample_budget))
    if failed is not None:
        checks.append(CheckRecord("h2 sampled form on cone clouds", FAIL, np.nan, 0.0, failed, int(sample_budget),
                                  "control solve failed inside the cone"))
    else:
        i = int(np.argmin(form))
        ok = form[i] >= 0
        checks.append(CheckRecord("h2 sampled form on cone clouds", SAMPLED_PASS if ok else FAIL, float(form[i]), 0.0,
                                  None if ok else {"cloud": i}, form.size, "normalised by ||Xt||^2 + ||Zt||^2"))

    # (h3) closed form on the declared constants
    scale = max(c.terminal_bound, cascade.lstar0)
    floor = min(cascade.lambda_1, c.running_convexity)
    checks.append(_exact_check("h3 lbar_f <= min(lambda_1, lambda_g) / (40 max(Lambda_k, L*0))",
                               c.drift_curvature, floor / (40 * scale), c.drift_curvature <= floor / (40 * scale)))
    checks.append(_exact_check("h3 8 lbar_g <= min(lambda_1, lambda_g)", 8 * c.running_cross_bound, floor,
                               8 * c.running_cross_bound <= floor))

    # consequences used by the control solve, on cone samples
    f_aa = np.abs(model.raw("drift_aa", x, M, a)) * grow
    checks.append(_sup_check("f_aa growth <= lambda_g / (40 max(Lambda_k, L*0))", f_aa,
                             c.running_convexity / (40 * scale), d))
    z = d.u * cone_bound(cascade.k0, x, mass)
    alpha, H, status = _cone_solve(model, x, M, z)
    if np.any(status):
        i = int(np.flatnonzero(status)[0])
        checks.append(CheckRecord("control solve on cone", FAIL, float(np.count_nonzero(status)), 0.0,
                                  _witness(d, i, z=z, status=status), status.size, "Newton failed inside the cone"))
        return AuditReport(model.name, int(sample_budget), box, checks)
    checks.append(CheckRecord("control solve on cone", SAMPLED_PASS, 0.0, 0.0, None, status.size))
    lower, upper = 0.95 * c.running_convexity, c.running_bound + c.running_convexity / 20
    checks.append(_inf_check("Hessian on cone >= 19/20 lambda_g", H, lower, d))
    checks.append(_sup_check("Hessian on cone <= Lambda_g + lambda_g/20", H, upper, d))
    f_a_hat = model.raw("drift_a", x, M, alpha)
    checks.append(_sup_check("coercivity on cone d_z alpha_hat f_a", -f_a_hat * f_a_hat / H, -cascade.lambda_z, d))
    return AuditReport(model.name, int(sample_budget), box, checks)


def _cloud_check(model, name, defect, n_clouds, box, with_control, cloud_size=4):
    """Bilinear form of d_mu d_x c on sampled clouds against -defect ||Xt||^2."""
    from .sampling import sobol_box

    n = cloud_size
    b = box["x"]
    s = sobol_box([-b] * n + [-1.0] * n + [-box["alpha"]] * n, [b] * n + [1.0] * n + [box["alpha"]] * n, n_clouds)
    X, Xt, A = s[:, :n], s[:, n : 2 * n], s[:, 2 * n :]
    M = model.feature_values(X).mean(axis=-1)
    if with_control:
        form = _cloud_bilinear(model, name, X, Xt, M, A)
    else:
        grads = model.raw(name, X, M[:, :, None])
        kernel = np.einsum("kci,kcj->cij", grads, model.feature_slopes(X))
        form = np.einsum("ci,cij,cj->c", Xt, kernel, Xt) / n**2
    size = np.mean(Xt**2, axis=1)
    keep = size > 0
    margin = form[keep] / size[keep] + defect
    X, Xt = X[keep], Xt[keep]
    i = int(np.argmin(margin))
    ok = margin[i] >= -IDENTITY_TOL
    label = "a2.ii.b" if with_control else "a3.i.b"
    return CheckRecord(f"{label} infinitesimal form / ||Xt||^2 + defect", SAMPLED_PASS if ok else FAIL,
                       float(margin[i]), 0.0, None if ok else {"cloud": X[i].tolist(), "direction": Xt[i].tolist()},
                       margin.size)


def _h1_check(model):
    from .measure import dirac

    delta = dirac(0.0)
    M = model.moments(delta)
    zero = np.zeros(1)
    terms = {
        "f": model.raw("drift", zero, M, zero),
        "g_x": model.raw("running_x", zero, M, zero),
        "g_a": model.raw("running_a", zero, M, zero),
        "d_mu g": _mu_slope(model, "running_m", zero, M[:, None], zero, zero),
        "k_x": model.raw("terminal_x", zero, M),
        "d_mu k": _mu_slope(model, "terminal_m", zero, M[:, None], None, zero),
    }
    values = {k: float(np.asarray(v).reshape(-1)[0]) for k, v in terms.items()}
    worst = max(abs(v) for v in values.values())
    return _exact_check("h1 vanishing data at (0, delta_0, 0)", worst, 0.0, worst == 0.0, values)


# --------------------------------------------------------------------------
# measured Lipschitz size of the decoupling field


class GammaLipschitz(NamedTuple):
    x_quotient: float
    measure_quotient: float
    bound: float

    @property
    def value(self):
        return max(self.x_quotient, self.measure_quotient)

    @property
    def within_bound(self):
        return self.value <= self.bound * (1 + 1e-3)


def measure_gamma_lipschitz(model, cascade, t, m, T, n_probes=16, dt=1e-3, settings=None, nudge=1e-4,
                            max_nudges=8):
    """Lower estimate of the Lipschitz size of the decoupling field.

    The x part is the largest difference quotient of Z against X over all
    pairs of probes and particles at every node, since every point of one
    solve sees the same measure flow.  The measure part nudges up to
    ``max_nudges`` particles and divides by the particle weight.
    """
    from .measure import EmpiricalMeasure
    from .solver import solve_global

    pts = m.points[:, 0]
    span = max(np.ptp(pts), 1.0)
    probes = np.linspace(pts.min() - 0.25 * span, pts.max() + 0.25 * span, int(n_probes))
    mu = m.without_probes().with_probes(probes)
    base = solve_global(model, cascade, mu, t, T, dt, settings)
    X, Z = base.X, base.Z
    order = np.argsort(X, axis=1)
    Xs = np.take_along_axis(X, order, axis=1)
    Zs = np.take_along_axis(Z, order, axis=1)
    dX = np.diff(Xs, axis=1)
    keep = dX > 1e-9 * (1 + np.abs(Xs[:, 1:]))
    # for a scalar map the largest chord slope is attained by neighbouring points
    x_quot = float(np.max(np.abs(np.diff(Zs, axis=1))[keep] / dX[keep])) if keep.any() else 0.0

    n = m.size
    g0 = Z[0, n:]
    m_quot = 0.0
    for j in np.linspace(0, n - 1, min(n, int(max_nudges))).astype(int):
        shifted = m.points.copy()
        shifted[j, 0] += nudge
        nudged = EmpiricalMeasure(shifted, m.weights, probes)
        g1 = solve_global(model, cascade, nudged, t, T, dt, settings).Z[0, n:]
        m_quot = max(m_quot, float(np.max(np.abs(g1 - g0))) / (nudge * m.weights[j]))
    return GammaLipschitz(x_quot, float(m_quot), float(cascade.lstar0))
