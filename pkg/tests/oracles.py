"""Independent reference computations used by the tests.

Nothing here imports the package's numerical internals; each oracle is
written directly from its defining formula.
"""
import math

import numba
import numpy as np
from scipy.integrate import quad_vec
from scipy.linalg import expm
from scipy.stats import norm


@numba.njit(cache=True)
def _first_exit_bridge(z, h, sigma, dt, n_paths, n_sub, n_block, seed):
    # Exact crossing test per substep: given its endpoints a, b < 0 a substep's
    # path reaches 0 with probability exp(-2ab / (sigma^2 d)).  Substeps are
    # grouped into blocks whose endpoints are sampled first; a block is only
    # refined into bridge-conditioned substeps when it could plausibly cross.
    np.random.seed(seed)
    per = n_sub // n_block
    d = dt / n_sub
    big = d * per
    s2 = sigma * sigma
    hits = 0
    for _ in range(n_paths):
        a = z
        hit = False
        for _ in range(n_block):
            b = a + h * big + sigma * math.sqrt(big) * np.random.standard_normal()
            if b > 0.0:
                hit = True
                break
            if math.exp(-2.0 * a * b / (s2 * big)) < 1e-14:
                a = b
                continue
            x = a
            for j in range(per):
                rem = (per - j) * d
                y = x + (b - x) * d / rem + sigma * math.sqrt(d * (rem - d) / rem) * np.random.standard_normal()
                if y > 0.0 or np.random.random() < math.exp(-2.0 * x * y / (s2 * d)):
                    hit = True
                    break
                x = y
            if hit:
                break
            a = b
        if hit:
            hits += 1
    return hits


def first_exit_frequency(z, h, sigma, dt, n_paths=100_000, n_sub=1000, seed=0, n_block=10):
    """Fraction of ``dY = h dt + sigma dW``, ``Y(0)=z`` paths reaching 0 within ``dt``."""
    if n_sub % n_block:
        raise ValueError("n_sub must be a multiple of n_block")
    return _first_exit_bridge(float(z), float(h), float(sigma), float(dt), int(n_paths), int(n_sub),
                              int(n_block), int(seed)) / n_paths


def discretize_by_quadrature(A, B, G, tau):
    """``(expm(A tau), int_0^tau e^{As} ds B, int_0^tau e^{As} G G' e^{A's} ds)`` by adaptive quadrature."""
    Ad = expm(A * tau)
    Bd, _ = quad_vec(lambda s: expm(A * s) @ B, 0.0, tau, epsabs=1e-15, epsrel=1e-13)
    Qd, _ = quad_vec(lambda s: expm(A * s) @ G @ G.T @ expm(A * s).T, 0.0, tau, epsabs=1e-16, epsrel=1e-13)
    return Ad, Bd, Qd


def augmented_covariance_recursion(Ad, Bd, Qd, K, L, R, C0, steps):
    """Closed-loop covariance of ``(x, xhat_pred)`` deviations at every control tick.

    Per tick: measurement update ``xhat+ = xhat + L (x + nu - xhat)``, control
    ``u = -K xhat+``, plant ``x' = Ad x + Bd u + w``, predictor ``xhat' = (Ad - Bd K) xhat+``.
    """
    n = Ad.shape[0]
    I = np.eye(n)
    out = [C0]
    C = C0
    for k in range(steps):
        Lk, Kk = L[k], K[k]
        U = np.block([[I, np.zeros((n, n))], [Lk, I - Lk]])
        P = np.block([[Ad, -Bd @ Kk], [np.zeros((n, n)), Ad - Bd @ Kk]])
        M = P @ U
        E = P @ np.vstack([np.zeros((n, n)), Lk])
        W = np.zeros((2 * n, 2 * n))
        W[:n, :n] = Qd
        C = M @ C @ M.T + E @ R @ E.T + W
        out.append(C)
    return out


def truncated_moments_by_sampling(mean, var, upper, n=1_000_000, seed=0):
    """Rejection-sampling estimates of (mean', var', mass) with their standard errors."""
    rng = np.random.default_rng(seed)
    x = rng.normal(mean, math.sqrt(var), n)
    keep = x[x <= upper]
    mass = keep.size / n
    m = keep.mean()
    v = keep.var()
    k = keep.size
    se_mass = math.sqrt(mass * (1 - mass) / n)
    se_mean = math.sqrt(v / k)
    m4 = np.mean((keep - m) ** 4)
    se_var = math.sqrt(max(m4 - v * v, 0.0) / k)
    return (m, v, mass), (se_mean, se_var, se_mass)


def orthant_mass(mean, cov, normals, offsets):
    """``P(n_i . x <= b_i for all i)`` for two constraints via the bivariate normal CDF."""
    N = np.asarray(normals, float)
    mu = N @ mean
    S = N @ cov @ N.T
    return float(norm_cdf2(np.asarray(offsets, float) - mu, S))


def norm_cdf2(upper, cov):
    from scipy.stats import multivariate_normal
    return multivariate_normal(mean=np.zeros(2), cov=cov).cdf(upper)


def psi_formula(z, h, sigma, dt):
    """Textbook first-passage probability of Brownian motion with drift, direct evaluation."""
    s = sigma * math.sqrt(dt)
    return norm.cdf((z + h * dt) / s) + math.exp(-2 * h * z / sigma ** 2) * norm.cdf((z - h * dt) / s)
