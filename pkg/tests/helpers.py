"""Shared oracles and builders for the test suite.

Everything here is deliberately independent of the package's fast paths:
general-form kernels via Bessel functions, dense Gaussian conditioning,
exhaustive enumeration plus Gauss-Hermite quadrature, and central finite
differences. Tests compare the package against these.
"""

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from geocausal.fields import CoefficientField, MeanNetwork
from geocausal.flows import FlowStack, identity_stack

GH_NODES, GH_WEIGHTS = np.polynomial.hermite.hermgauss(32)


def matern_general(r, nu, variance, length_scale):
    """Matern kernel through the modified Bessel function, any nu > 0."""
    r = np.asarray(r, dtype=float)
    scaled = np.sqrt(2.0 * nu) * r / length_scale
    out = np.empty_like(scaled)
    zero = scaled == 0
    out[zero] = variance
    s = scaled[~zero]
    out[~zero] = (
        variance * (2.0 ** (1.0 - nu) / gamma_fn(nu)) * s**nu * kv(nu, s)
    )
    return out


def gauss_hermite_expect(fn, mean=0.0, std=1.0):
    """E[fn(x)] for x ~ N(mean, std^2) by 32-node Gauss-Hermite."""
    x = mean + std * np.sqrt(2.0) * GH_NODES
    return float(np.sum(GH_WEIGHTS * fn(x)) / np.sqrt(np.pi))


def softplus(x):
    return np.logaddexp(0.0, x)


def exact_latent_expectation(q_node, w0, we, parents):
    """E_q[log p(x | parents, eps)] by full enumeration.

    parents: list of ("binary", q_k, draws_k) or ("alpha", alpha, draws_k)
    entries. Latent and parent states are enumerated, independent draw
    sets are combined by an outer product of sample averages, and eps is
    integrated by Gauss-Hermite. This is the quantity the Jensen-bounded
    term must stay below.
    """
    combos = [(0.0, 1.0)]
    for kind, val, draws in parents:
        new = []
        for base, weight in combos:
            if kind == "binary":
                for x_k, w_k in ((0.0, 1.0 - val), (1.0, val)):
                    for d in draws:
                        new.append((base + d * x_k, weight * w_k / len(draws)))
            else:
                for d in draws:
                    new.append((base + d * val, weight / len(draws)))
        combos = new

    total = 0.0
    for x_i, w_i in ((1.0, q_node), (0.0, 1.0 - q_node)):
        for base, weight in combos:
            sign = 1.0 if x_i == 1.0 else -1.0
            val = gauss_hermite_expect(
                lambda eps, b=base, s=sign: -softplus(-s * (b + we * eps + w0))
            )
            total += w_i * weight * val
    return total


def exact_obs_expectation(log_y, q, draw_sets, w0_y, we_y):
    """E[log p(y | parents)] by enumerating parent states and averaging
    over independent coefficient draw sets. Includes every constant."""
    combos = [(0.0, 1.0)]
    for q_k, draws in zip(q, draw_sets):
        new = []
        for base, weight in combos:
            for x_k, w_k in ((0.0, 1.0 - q_k), (1.0, q_k)):
                for d in draws:
                    new.append((base + d * x_k, weight * w_k / len(draws)))
        combos = new
    total = 0.0
    for mu_part, weight in combos:
        mu = w0_y + mu_part
        logpdf = (
            -0.5 * np.log(2.0 * np.pi)
            - np.log(we_y)
            - (log_y - mu) ** 2 / (2.0 * we_y**2)
        )
        total += weight * (logpdf - log_y)
    return total


def central_diff(fn, x, h=1e-5):
    """Central finite-difference gradient of a scalar function of a flat
    numpy vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2.0 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / scale)


def dense_conditional_oracle(points_u, q_mean, q_cov, kernel, x_targets, m_u, m_t):
    """Marginal conditional moments by direct dense linear algebra.

    kernel(a, b) returns the cross-gram; jitter handling is the caller's
    problem (pass a jittered square gram through kernel for u x u).
    """
    k_uu = kernel(points_u, points_u)
    k_ut = kernel(points_u, x_targets)
    k_tt_diag = np.diag(kernel(x_targets, x_targets))
    a = np.linalg.solve(k_uu, k_ut)
    mean = m_t + k_ut.T @ np.linalg.solve(k_uu, q_mean - m_u)
    var = k_tt_diag - np.sum(k_ut * a, axis=0) + np.sum(a * (q_cov @ a), axis=0)
    return mean, var


def make_field(rng, n_inducing=6, in_dim=3, rank=2, depth=2, name="lam_ls"):
    """Small random coefficient field for unit tests."""
    points = rng.normal(size=(n_inducing, in_dim))
    if depth == 0:
        flow = identity_stack()
    else:
        flow = FlowStack(
            rng.normal(0.0, 0.5, depth),
            rng.normal(0.0, 0.5, depth),
            rng.normal(0.0, 0.3, depth),
        )
    return CoefficientField(
        name=name,
        mean_net=MeanNetwork.init(in_dim, rng),
        log_variance=float(rng.normal(0.0, 0.2)),
        log_length=float(np.log(2.0) + rng.normal(0.0, 0.1)),
        points=points,
        mu_u=rng.normal(0.0, 0.5, n_inducing),
        low_rank=rng.normal(0.0, 0.3, (n_inducing, rank)),
        log_diag=np.log(0.05 + rng.uniform(0.0, 0.1, n_inducing)),
        flow=flow,
    )
