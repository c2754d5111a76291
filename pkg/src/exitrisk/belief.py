"""LTV-Gaussian closed-loop beliefs, LQG tracking design, Gaussian truncation.

The belief is carried over the augmented vector ``(x, xhat)``.  Its meaning
depends on where ``time`` falls relative to the control grid:

* exactly on a control tick ``t_k``: ``xhat`` is the *predicted* estimate,
  before the measurement taken at ``t_k`` is folded in;
* strictly between ticks: ``xhat`` is the filtered estimate from the last
  tick, which is what the zero-order-hold controller is acting on.

This matches the order of operations in :mod:`exitrisk.monte_carlo`
(observe, update, act, integrate).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import expm
from scipy.special import log_ndtr

from .sde_models import FeedbackPolicy, ItoSystem, SafeSet, integrate_noiseless

PSD_SLACK = 1e-9
GRID_TOL = 1e-9


class NumericalConditioningError(ArithmeticError):
    pass


class RiccatiDivergenceError(ArithmeticError):
    pass


class DegenerateTruncationError(ArithmeticError):
    """The retained mass of a truncation is numerically zero."""


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray
    time: float

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValueError("belief mean/cov shapes disagree")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def from_state(cls, mean, cov, time: float = 0.0) -> "GaussianBelief":
        """Initial augmented belief: true state uncertain, estimate at the prior mean."""
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        n = mean.size
        big = np.zeros((2 * n, 2 * n))
        big[:n, :n] = cov
        return cls(np.concatenate([mean, mean]), big, time)

    @property
    def n(self) -> int:
        return self.mean.size // 2

    @property
    def state_mean(self) -> np.ndarray:
        return self.mean[: self.n]

    @property
    def state_cov(self) -> np.ndarray:
        return self.cov[: self.n, : self.n]

    def check_psd(self, slack: float = PSD_SLACK) -> None:
        if not np.allclose(self.cov, self.cov.T, atol=1e-10, rtol=0):
            raise NumericalConditioningError("belief covariance lost symmetry")
        lo = np.linalg.eigvalsh(self.cov).min()
        scale = max(1.0, float(np.abs(self.cov).max()))
        if lo < -slack * scale:
            raise NumericalConditioningError(f"belief covariance not PSD (min eigenvalue {lo:.3e})")


def _sym(C):
    return 0.5 * (C + C.T)


@dataclass(frozen=True)
class LqgDesign:
    """Per-tick linearisation, LQR gains and Kalman gains about a nominal plan."""

    dt: float
    nominal_states: np.ndarray
    nominal_controls: np.ndarray
    A_c: np.ndarray
    B_c: np.ndarray
    A_d: np.ndarray
    B_d: np.ndarray
    process_cov: np.ndarray
    lqr_gains: np.ndarray
    kalman_gains: np.ndarray
    initial_cov: np.ndarray
    obs_cov: np.ndarray
    diffusion_gram: np.ndarray

    @property
    def num_ticks(self) -> int:
        return self.lqr_gains.shape[0]

    @property
    def horizon(self) -> float:
        return self.num_ticks * self.dt

    @property
    def linearization(self):
        return self.A_d, self.B_d

    @property
    def policy(self) -> FeedbackPolicy:
        return FeedbackPolicy(self.nominal_states, self.nominal_controls,
                              gains=self.lqr_gains, estimator_gains=self.kalman_gains)

    def initial_belief(self) -> GaussianBelief:
        return GaussianBelief.from_state(self.nominal_states[0], self.initial_cov, 0.0)

    def flow_matrices(self, k: int, tau: float):
        """``(A, B, Q)`` mapping deviations across ``tau`` seconds inside tick ``k``."""
        return _discretize(self.A_c[k], self.B_c[k], self.diffusion_gram[k], tau)


def _discretize(Ac, Bc, GGt, tau):
    n, m = Bc.shape
    if tau <= 0:
        return np.eye(n), np.zeros((n, m)), np.zeros((n, n))
    M = np.zeros((n + m, n + m))
    M[:n, :n] = Ac
    M[:n, n:] = Bc
    E = expm(M * tau)
    A, B = E[:n, :n], E[:n, n:]
    # Van Loan: exact integral of e^{As} GG^T e^{A^T s} over [0, tau]
    V = np.zeros((2 * n, 2 * n))
    V[:n, :n] = -Ac
    V[:n, n:] = GGt
    V[n:, n:] = Ac.T
    F = expm(V * tau)
    Q = _sym(F[n:, n:].T @ F[:n, n:])
    return A, B, Q


def riccati_gains(A_d, B_d, Q, R, Qf, divergence_threshold: float = 1e12) -> np.ndarray:
    """Backward discrete Riccati recursion; ``K_k = (B'PB + R)^-1 B'PA`` with ``P_N = Qf``."""
    N, n, m = B_d.shape
    K = np.empty((N, m, n))
    P = np.asarray(Qf, dtype=float).copy()
    for k in range(N - 1, -1, -1):
        A, B = A_d[k], B_d[k]
        K[k] = np.linalg.solve(B.T @ P @ B + R, B.T @ P @ A)
        P = _sym(Q + A.T @ P @ (A - B @ K[k]))
        if not np.all(np.isfinite(P)) or np.linalg.norm(P) > divergence_threshold:
            raise RiccatiDivergenceError(f"Riccati recursion diverged at tick {k}")
    return K


def design_lqg(system: ItoSystem, nominal: FeedbackPolicy, q_weights, r_weights, horizon: float,
               initial_cov=None, terminal_weights=None, divergence_threshold: float = 1e12) -> LqgDesign:
    """Finite-horizon LQR plus time-varying Kalman filter about ``nominal``.

    The LQR gain follows the usual discrete Riccati step
    ``K = (B'PB + R)^-1 B'PA``; the policy applies ``u = u_nom - K dx``.
    """
    nominal.check_horizon(system.control_rate_hz, horizon)
    n, m = system.state_dim, system.control_dim
    N = nominal.num_ticks
    dt = system.control_dt
    Q = np.diag(np.broadcast_to(np.asarray(q_weights, dtype=float), (n,)))
    R = np.diag(np.broadcast_to(np.asarray(r_weights, dtype=float), (m,)))
    Qf = Q if terminal_weights is None else np.diag(np.broadcast_to(np.asarray(terminal_weights, float), (n,)))
    P0 = np.zeros((n, n)) if initial_cov is None else np.asarray(initial_cov, dtype=float)
    Rv = system.observation_noise_cov

    xs, us = nominal.nominal_states, nominal.nominal_controls
    A_c = np.empty((N, n, n))
    B_c = np.empty((N, n, m))
    A_d = np.empty((N, n, n))
    B_d = np.empty((N, n, m))
    Qd = np.empty((N, n, n))
    GG = np.empty((N, n, n))
    for k in range(N):
        t = k * dt
        A_c[k], B_c[k] = system.linearize(t, xs[k], us[k])
        G = system.G(t, xs[k], us[k])
        GG[k] = G @ G.T
        A_d[k], B_d[k], Qd[k] = _discretize(A_c[k], B_c[k], GG[k], dt)

    K = riccati_gains(A_d, B_d, Q, R, Qf, divergence_threshold)

    L = np.empty((N, n, n))
    Pm = P0.copy()
    I = np.eye(n)
    for k in range(N):
        S = Pm + Rv
        L[k] = Pm @ np.linalg.pinv(S, rcond=1e-13, hermitian=True)
        IL = I - L[k]
        Pp = _sym(IL @ Pm @ IL.T + L[k] @ Rv @ L[k].T)
        Pm = _sym(A_d[k] @ Pp @ A_d[k].T + Qd[k])

    return LqgDesign(dt=dt, nominal_states=xs, nominal_controls=us, A_c=A_c, B_c=B_c, A_d=A_d, B_d=B_d,
                     process_cov=Qd, lqr_gains=K, kalman_gains=L, initial_cov=P0, obs_cov=Rv,
                     diffusion_gram=GG)


def _locate(t: float, dt: float):
    k = int(math.floor(t / dt + GRID_TOL))
    tau = t - k * dt
    if abs(tau) < GRID_TOL * max(1.0, dt):
        tau = 0.0
    return k, tau


class _Propagator:
    """Caches nominal reference flows; shared by successive propagation calls."""

    def __init__(self, system: ItoSystem, design: LqgDesign):
        self.system = system
        self.design = design
        self._ref = {}

    def reference(self, k: int, tau: float) -> np.ndarray:
        key = (k, round(tau, 12))
        if key not in self._ref:
            d = self.design
            if tau == 0.0:
                self._ref[key] = d.nominal_states[k]
            else:
                self._ref[key] = integrate_noiseless(self.system, k * d.dt, d.nominal_states[k],
                                                     d.nominal_controls[k], tau)
        return self._ref[key]

    def update(self, mean, cov, k):
        d = self.design
        n = d.nominal_states.shape[1]
        L = d.kalman_gains[k]
        x, xh = mean[:n], mean[n:]
        new_mean = np.concatenate([x, xh + L @ (x - xh)])
        F = np.zeros((2 * n, 2 * n))
        F[:n, :n] = np.eye(n)
        F[n:, :n] = L
        F[n:, n:] = np.eye(n) - L
        W = np.zeros_like(cov)
        W[n:, n:] = L @ d.obs_cov @ L.T
        return new_mean, _sym(F @ cov @ F.T + W)

    def flow(self, mean, cov, k, tau0, tau1):
        d = self.design
        n = d.nominal_states.shape[1]
        A, B, Q = d.flow_matrices(k, tau1 - tau0)
        K = d.lqr_gains[k]
        x, xh = mean[:n], mean[n:]
        ref0, ref1 = self.reference(k, tau0), self.reference(k, tau1)
        new_x = ref1 + A @ (x - ref0) - B @ (K @ (xh - d.nominal_states[k]))
        F = np.eye(2 * n)
        F[:n, :n] = A
        F[:n, n:] = -B @ K
        W = np.zeros_like(cov)
        W[:n, :n] = Q
        return np.concatenate([new_x, xh]), _sym(F @ cov @ F.T + W)

    def predict_estimate(self, mean, cov, k):
        """Held filtered estimate -> predicted estimate at the next tick."""
        d = self.design
        n = d.nominal_states.shape[1]
        M = d.A_d[k] - d.B_d[k] @ d.lqr_gains[k]
        xh = mean[n:]
        new_xh = self.reference(k, d.dt) + M @ (xh - d.nominal_states[k])
        F = np.eye(2 * n)
        F[n:, n:] = M
        return np.concatenate([mean[:n], new_xh]), _sym(F @ cov @ F.T)

    def propagate(self, belief: GaussianBelief, t_to: float) -> GaussianBelief:
        d = self.design
        t = belief.time
        if not t_to > t - GRID_TOL:
            raise ValueError("t_to must not precede the belief time")
        if t_to > d.horizon + GRID_TOL:
            raise ValueError("propagation beyond the designed horizon")
        mean, cov = belief.mean, belief.cov
        while t_to - t > GRID_TOL:
            k, tau = _locate(t, d.dt)
            if tau == 0.0:
                mean, cov = self.update(mean, cov, k)
            k_end, tau_end = _locate(t_to, d.dt)
            tau1 = d.dt if k_end > k else tau_end
            mean, cov = self.flow(mean, cov, k, tau, tau1)
            if tau1 == d.dt:
                mean, cov = self.predict_estimate(mean, cov, k)
                t = (k + 1) * d.dt
            else:
                t = k * d.dt + tau1
        out = GaussianBelief(mean, cov, float(t_to))
        out.check_psd()
        return out


def propagate_belief(system: ItoSystem, design: LqgDesign, belief: GaussianBelief,
                     t_from: Optional[float] = None, t_to: Optional[float] = None,
                     propagator: Optional[_Propagator] = None) -> GaussianBelief:
    """Push an augmented belief forward in time under the closed-loop LTV model.

    ``t_from`` defaults to ``belief.time``; if given it must agree with it.
    Times need not lie on the control grid.
    """
    if t_to is None:
        raise TypeError("t_to is required")
    if t_from is not None and abs(t_from - belief.time) > GRID_TOL:
        raise ValueError("t_from does not match the belief time")
    prop = propagator if propagator is not None else _Propagator(system, design)
    return prop.propagate(belief, t_to)


def apriori_beliefs(system: ItoSystem, design: LqgDesign, initial: GaussianBelief, times) -> list[GaussianBelief]:
    """Unconditioned beliefs at each of ``times`` (the first must be ``initial.time``)."""
    prop = _Propagator(system, design)
    out = [initial]
    for t in list(times)[1:]:
        out.append(prop.propagate(out[-1], float(t)))
    return out


def truncate_gaussian_1d(mean: float, var: float, upper: float):
    """Moment-matched ``N(mean, var)`` conditioned on ``value <= upper``.

    Returns ``(mean', var', mass)`` where ``mass`` is the retained probability.
    """
    if not var > 0:
        raise ValueError("var must be positive")
    if upper == np.inf:
        return float(mean), float(var), 1.0
    s = math.sqrt(var)
    a = (upper - mean) / s
    log_mass = float(log_ndtr(a))
    mass = math.exp(log_mass)
    if mass < 1e-12:
        raise DegenerateTruncationError(f"retained mass {mass:.3e} below 1e-12")
    lam = math.exp(-0.5 * a * a - 0.5 * math.log(2 * math.pi) - log_mass)
    new_mean = mean - s * lam
    factor = 1.0 - a * lam - lam * lam
    new_var = var * min(1.0, max(factor, 0.0))
    return float(new_mean), float(new_var), float(mass)


def condition_on_safety(belief: GaussianBelief, safe_set: SafeSet):
    """Sequential per-constraint 1-D truncation (in constraint-list order).

    Each constraint is linearised at the current mean,
    ``g(x) ~ g(m) + a'(x - m)``, and the belief is truncated along ``a``.
    Returns the conditioned belief and the product of retained masses.
    """
    out, masses = condition_sequence(belief, safe_set)
    return out, float(np.prod(masses)) if masses else 1.0


def condition_sequence(belief: GaussianBelief, safe_set: SafeSet):
    """As :func:`condition_on_safety` but returns the per-constraint masses."""
    mean, cov = belief.mean.copy(), belief.cov.copy()
    n = belief.n
    masses = []
    for c in safe_set:
        m = mean[:n]
        gm = float(c.g(m))
        a = np.zeros(2 * n)
        a[:n] = c.gradient(m)
        Ca = cov @ a
        var = float(a @ Ca)
        mu = float(a @ mean)
        if var <= 1e-300:
            if gm > 0:
                raise DegenerateTruncationError("deterministic belief lies outside the safe set")
            masses.append(1.0)
            continue
        new_mu, new_var, mass = truncate_gaussian_1d(mu, var, mu - gm)
        masses.append(mass)
        k = Ca / var
        mean = mean + k * (new_mu - mu)
        cov = _sym(cov - np.outer(Ca, Ca) * ((var - new_var) / var ** 2))
    return GaussianBelief(mean, cov, belief.time), masses
