"""Reference values computed independently of the package internals."""
import math

import numpy as np

# lq_smooth data, restated so the oracle does not import the builtin table
LQ_A, LQ_S, LQ_KAPPA, LQ_G1, LQ_G2, LQ_X0 = -0.5, 0.4, 0.5, 1.0, 2.0, 1.0


def lq_open_loop_cost(u, n_steps, horizon=1.0, half=0.5):
    """Exact Euler-discrete cost of a deterministic control by mean/variance recursion."""
    dt = horizon / n_steps
    A = 1.0 + LQ_A * dt
    k_half = int(round(half / dt))
    m, v = LQ_X0, 0.0
    total = 0.0
    for k in range(n_steps):
        if k == k_half:
            total += 0.5 * LQ_G1 * ((m - 1.0) ** 2 + v)
        total += dt * (0.5 * u[k] ** 2 + 0.5 * LQ_KAPPA * (m * m + v))
        m = A * m + u[k] * dt
        v = A * A * v + LQ_S ** 2 * dt
    return total + 0.5 * LQ_G2 * (m * m + v)


def lq_open_loop_gradient(u, n_steps, h=1e-6):
    g = np.empty(len(u))
    for k in range(len(u)):
        up, dn = np.array(u, float), np.array(u, float)
        up[k] += h
        dn[k] -= h
        g[k] = (lq_open_loop_cost(up, n_steps) - lq_open_loop_cost(dn, n_steps)) / (2 * h)
    return g


def example1_value():
    """E[-2 (1 + W(1/2))^2 + (1 + W(1/2))^2] = -(1 + 1/2)."""
    return -1.5


def example2_discrete_means(u, n_steps):
    """(E y1, E y2) for the left-point Euler scheme with deterministic u."""
    dt = 1.0 / n_steps
    s = np.arange(n_steps) * dt
    incr = (np.asarray(u, float) - 8.0 * s / 3.0) * dt
    h = n_steps // 2
    return float(incr[:h].sum()), float(incr.sum())


def folded_normal_mean(eps):
    return eps * math.sqrt(2.0 / math.pi)


def mollified_abs(y, eps):
    """E|y + eps Z| in closed form."""
    from scipy.stats import norm

    y = np.asarray(y, float)
    return y * (2 * norm.cdf(y / eps) - 1) + 2 * eps * norm.pdf(y / eps)
