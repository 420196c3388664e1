"""Independent reference values: LQ closed forms and a straight-line constant chain."""

import math

import numpy as np


# LQ example: f = a, g = (a^2 + x^2) / 2, k = x^2 / 2.  The Riccati solution
# is identically 1, so every agent decays like exp(-(s - t)) and alpha = -Z.


def lq_state(x0, s, t=0.0):
    return x0 * np.exp(-(np.asarray(s) - t))


def lq_costate(x0, s, t=0.0):
    return lq_state(x0, s, t)


def lq_value(x0):
    return 0.5 * x0 * x0


def straight_line_cascade(lf_low, lam1_big, lam2_big, lam3_big, lbar_f, lam_g, big_g, l_g, lbar_g,
                          lam_k, big_k, l_k, origin, d_x=1):
    """The constant chain written out one formula per line, no shared helpers."""
    big_f = max(lam1_big, lam2_big, lam3_big)
    lam_z = lf_low**2 / (big_g + lam_g / 20)
    lhs = (lam2_big + 0.25 * lam1_big) ** 2
    rhs = 4 * (lam_g - l_g) * lam_z
    theta = math.sqrt(lhs / rhs)
    lam_1 = (1 - theta) * (lam_g - l_g)
    lam_2 = (1 - theta) * lam_z
    lam_x = 0.8 * lam_g
    eps_1 = min(0.5 * (lam_k - l_k), 0.5 * lam_2, 0.4 * lam_1)
    k_bar = 0.5 * (lam_k - l_k)
    z_bar = 0.5 * lam_2
    x_bar = 0.4 * lam_1
    eps_2 = min(0.25 * lam_k, 0.25 * lam_z, 0.125 * lam_g)
    big_h = big_g + min(lam_1, lam_g) / 20
    l1 = max(big_k**2 / lam_k, (big_h + lam_g / 20) / lam_z, (2.5 * big_f + big_h + lam_g / 20) / lam_x)
    l2 = max(6 * big_k**2 / k_bar, (2 * big_g + lam_g / 10) / x_bar,
             (1.25 * big_f + 3 * big_g + 0.3 * lam_g) / z_bar)
    cross = 25 / 16 * big_f**2 + (big_g + lam_g / 10) ** 2
    l3 = max((3 + l2 / (4 * eps_1)) * big_k**2 / lam_k, (big_g + lam_g / 10 + l2 / (4 * eps_1) * cross) / lam_x)
    l4 = max(big_k**2 / (4 * eps_1 * lam_k), cross / (4 * eps_1 * lam_x))
    l5 = max(big_k**2 / (4 * eps_2 * k_bar), (25 / 16 * big_f**2 + lam_g**2 / 400) / (4 * eps_2 * x_bar))
    l6 = max(6 * big_k**2 / lam_k, 2 * (1.25 * big_f + 3 * big_g + 0.3 * lam_g) / lam_z,
             2 * (big_g + lam_g / 10) / lam_g, 3 * big_k**2 / k_bar, (big_g + lam_g / 10) / x_bar,
             3 * big_k**2 / lam_k, (big_g + lam_g / 10) / lam_x)
    l0 = d_x * max(l1, math.sqrt((l4 * (2 + l5) + 1) * l1 * l6))
    k0 = 4 * max(big_k, l0)
    L_f = max(big_f, abs(origin["drift"]))
    L_g = max(abs(origin["running_x"]), abs(origin["running_a"]), big_g, lbar_g)
    L_k = max(abs(origin["terminal_x"]), big_k)
    L_alpha = max(20 * big_f / (19 * lam_g), 20 * (lbar_g + 0.5 * k0 * lbar_f) / (19 * lam_g),
                  abs(origin["alpha_hat"]))
    L_p = big_k
    L_p_bar = max(abs(origin["terminal_x"]), big_k)
    return {
        "theta": theta, "lambda_1": lam_1, "lambda_2": lam_2, "lambda_z": lam_z, "lambda_x": lam_x,
        "eps_1": eps_1, "eps_2": eps_2, "lambda_k_bar": k_bar, "lambda_z_bar": z_bar,
        "lambda_x_bar": x_bar, "hamiltonian_bound": big_h, "lstar1": l1, "lstar2": l2, "lstar3": l3,
        "lstar4": l4, "lstar5": l5, "lstar6": l6, "lstar0": l0, "k0": k0, "L_f": L_f, "L_g": L_g,
        "L_k": L_k, "L_alpha": L_alpha, "L_p": L_p, "L_p_bar": L_p_bar,
        "L_B": L_f * (1 + L_alpha + 2 * L_p * L_alpha),
        "L_B_bar": L_f * (1 + L_alpha + 2 * L_p_bar * L_alpha),
        "L_B_prime": big_f * (1 + L_alpha + l0 * L_alpha),
    }


def cascade_from_declared(model, origin):
    c = model.constants
    return straight_line_cascade(
        c.drift_control_lower, c.drift_control_bound, c.drift_measure_bound, c.drift_state_bound,
        c.drift_curvature, c.running_convexity, c.running_bound, c.running_monotone_defect,
        c.running_cross_bound, c.terminal_convexity, c.terminal_bound, c.terminal_monotone_defect,
        origin, model.d_x,
    )


# frozen values of the non-LQ default chain, recorded once to catch drift
NONLQ_DEFAULT_LSTAR0 = 1857.45
NONLQ_DEFAULT_THETA = 0.9194
NONLQ_DEFAULT_LAMBDA_1 = 0.04028
LQ_THETA = 0.12809
