"""Interval exit probabilities for the frozen-coefficient constraint process.

Over ``[t_i, t_i + dt)`` each constraint value ``y = g_j(x)`` is treated as a
scalar Brownian motion with drift ``h`` and diffusion ``sigma`` frozen at the
interval start.  :func:`psi` is the classical probability that such a
process, started at ``z <= 0``, crosses zero before ``dt``; the remaining
functions integrate it against a Gaussian state measure and sum over
constraints (union bound).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import log_ndtr, ndtr

from . import quadrature
from .belief import GaussianBelief
from .sde_models import Constraint, ItoSystem, SafeSet

REDUCTIONS = ("full", "position_plus_scalar_drift", "position_only")
MODES = ("plain", "safe_weighted")


class InvalidReductionError(ValueError):
    pass


def psi(z, h, sigma, dt):
    """Probability that ``z + h s + sigma W_s`` exceeds 0 for some ``s < dt``.

    With ``sigma == 0`` the deterministic limit ``1(z + h dt > 0)`` is used.
    Starting points ``z >= 0`` are on or past the boundary and return 1.
    Broadcasts over array inputs; returns a float for scalar inputs.
    """
    scalar = all(np.ndim(a) == 0 for a in (z, h, sigma, dt))
    z, h, s, dt = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (z, h, sigma, dt)))
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(h)) and np.all(np.isfinite(s)) and np.all(np.isfinite(dt))):
        raise ValueError("psi requires finite inputs")
    if np.any(dt <= 0):
        raise ValueError("psi requires dt > 0")
    if np.any(s < 0):
        raise ValueError("psi requires sigma >= 0")

    out = np.empty(z.shape)
    det = s == 0.0
    out[det] = (z[det] + h[det] * dt[det] > 0.0)
    sto = ~det
    if np.any(sto):
        zz, hh, ss, tt = z[sto], h[sto], s[sto], dt[sto]
        sd = ss * np.sqrt(tt)
        first = ndtr((zz + hh * tt) / sd)
        # exp(-2hz/s^2) overflows when hz << 0; the product with the normal
        # tail is formed in log space and saturates at 1.
        log_second = -2.0 * hh * zz / (ss * ss) + log_ndtr((zz - hh * tt) / sd)
        second = np.exp(np.minimum(log_second, 0.0))
        out[sto] = np.minimum(first + second, 1.0)
    out[z >= 0.0] = 1.0
    np.clip(out, 0.0, 1.0, out=out)
    return float(out) if scalar else out


@dataclass(frozen=True)
class LocalCoefficients:
    z: np.ndarray
    h: np.ndarray
    sigma: np.ndarray
    dt: Optional[float] = None

    def with_dt(self, dt: float) -> "LocalCoefficients":
        if not dt > 0:
            raise ValueError("dt must be positive")
        return LocalCoefficients(self.z, self.h, self.sigma, dt)

    def psi(self):
        return psi(self.z, self.h, self.sigma, self.dt)


def local_coefficients(system: ItoSystem, constraint: Constraint, t: float, x, u) -> LocalCoefficients:
    """Ito drift/diffusion of ``g_j(x(t))``: ``h = a'f + tr(G'HG)/2``, ``sigma = ||a'G||``.

    Vectorised over leading axes of ``x``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    z = constraint.g(x)
    a = constraint.gradient(x)
    f = system.drift(t, x, u)
    G = system.G(t, x, u)
    H = constraint.hessian(x)
    aG = np.einsum("...i,...ij->...j", a, G)
    curv = 0.5 * np.einsum("...ij,...ik,...kj->...", G, H, G)
    h = np.einsum("...i,...i->...", a, f) + curv
    sigma = np.linalg.norm(aG, axis=-1)
    return LocalCoefficients(z, h, sigma)


@dataclass(frozen=True)
class QuadratureSpec:
    """Grid resolution and dimension reduction for exit-probability integrals.

    ``points_per_axis=None`` picks 81 points for up to two integration
    dimensions, 41 for three and fewer beyond.  ``reduction=None`` picks the
    cheapest valid reduction for the system/constraint pair.
    """

    points_per_axis: Optional[int] = None
    box_halfwidth_sigmas: float = 5.0
    reduction: Optional[str] = None

    def __post_init__(self):
        if self.points_per_axis is not None and self.points_per_axis < 3:
            raise ValueError("points_per_axis must be >= 3")
        if self.box_halfwidth_sigmas < 3:
            raise ValueError("box_halfwidth_sigmas must be >= 3")
        if self.reduction is not None and self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")

    def points(self, dim: int) -> int:
        return self.points_per_axis if self.points_per_axis is not None else quadrature.default_points(dim)


def _workspace_ok(system: ItoSystem, constraint: Constraint) -> bool:
    return (bool(system.position_indices) and len(system.velocity_indices) == len(system.position_indices)
            and constraint.workspace_support is not None
            and set(constraint.workspace_support) <= set(system.position_indices))


def select_reduction(system: ItoSystem, constraints, spec: QuadratureSpec, t: float = 0.0, x=None, u=None) -> str:
    if spec.reduction is not None:
        return spec.reduction
    if constraints and all(_workspace_ok(system, c) for c in constraints):
        if system.is_locally_deterministic(t, x, u):
            return "position_only"
        return "position_plus_scalar_drift"
    return "full"


def _as_measure(measure):
    if isinstance(measure, GaussianBelief):
        return measure.state_mean, measure.state_cov, 1.0
    if isinstance(measure, tuple) and len(measure) == 2 and isinstance(measure[0], GaussianBelief):
        b, w = measure
        return b.state_mean, b.state_cov, float(w)
    raise TypeError("measure must be a GaussianBelief or a (GaussianBelief, weight) pair")


def _embed_positions(P, pos, n):
    X = np.zeros(P.shape[:-1] + (n,))
    X[..., list(pos)] = P
    return X


def interval_exit_prob_constraint(system: ItoSystem, constraint: Constraint, measure, t_i: float, t_next: float,
                                  spec: QuadratureSpec = QuadratureSpec(), safe_set: Optional[SafeSet] = None,
                                  control=None) -> float:
    """``int psi(g_j(x), h_j(x), ||sigma_j(x)||, dt) dmu(x)`` for one constraint.

    ``measure`` is a :class:`GaussianBelief` (its state marginal is used) or a
    ``(belief, weight)`` pair.  Passing ``safe_set`` multiplies the integrand
    by the safe-set indicator (the start-of-interval safety bound); otherwise
    mass already outside constraint ``j`` counts as exiting with certainty.
    ``control`` is the control used in the drift for the ``full`` reduction.
    """
    dt = float(t_next - t_i)
    if not dt > 0:
        raise ValueError("t_next must exceed t_i")
    mean, cov, weight = _as_measure(measure)
    n = system.state_dim
    u = np.zeros(system.control_dim) if control is None else np.asarray(control, dtype=float)
    reduction = select_reduction(system, [constraint], spec, t_i, mean, u)

    if reduction == "full":
        value = _full(system, constraint, mean, cov, t_i, dt, u, spec, safe_set)
    else:
        if not _workspace_ok(system, constraint):
            raise InvalidReductionError(f"{reduction} needs a workspace constraint on an integrator system")
        if safe_set is not None and not all(_workspace_ok(system, c) for c in safe_set):
            raise InvalidReductionError(f"{reduction} needs every safe-set constraint to be a workspace constraint")
        pos = list(system.position_indices)
        G = system.G(t_i, mean, u)
        if reduction == "position_only" and np.any(G[..., pos, :] != 0.0):
            raise InvalidReductionError("position_only requires zero diffusion on the position rows")
        value = _reduced(system, constraint, mean, cov, t_i, dt, u, spec, safe_set, reduction)
    return weight * value


def _branches(mode_safe: bool, inner_values, ones, extra_level: bool, arg=None):
    """Inside the region the integrand is ``inner`` (gated by the crossing level when
    the interval is deterministic, times ``Phi(arg)`` when given); outside it is 1
    in plain mode, 0 when safe-weighted."""
    if extra_level:
        inside_pred = lambda ins: ins[0] & ins[1]
    else:
        inside_pred = lambda ins: ins[0]
    branches = [(inside_pred, inner_values) if arg is None else (inside_pred, inner_values, arg)]
    if not mode_safe:
        branches.append((lambda ins: ~ins[0], ones))
    return branches


def _reduced(system, constraint, mean, cov, t, dt, u, spec, safe_set, reduction):
    n = system.state_dim
    pos = list(system.position_indices)
    vel = list(system.velocity_indices)
    dim = len(pos) + (1 if reduction == "position_plus_scalar_drift" else 0)
    pts = spec.points(dim)
    box = spec.box_halfwidth_sigmas
    grid = quadrature.gaussian_grid(mean[pos], cov[np.ix_(pos, pos)], pts, box)
    P = grid.nodes
    X = _embed_positions(P, pos, n)
    gain, mv, Cv = quadrature.conditional_gaussian(mean, cov, pos, vel)
    vmean = mv + (P - mean[pos]) @ gain.T
    z = constraint.g(X)
    a = constraint.gradient(X)[..., pos]
    vbar = np.einsum("...i,...i->...", a, vmean)
    s = np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", a, Cv, a), 0.0))

    extra = False
    arg = None
    if reduction == "position_only":
        if np.all(s > 0):
            # Phi((vbar + z/dt)/s) jumps over ~vbar*dt in position; integrated per cell
            inner = np.ones_like(z)
            arg = (vbar + z / dt) / s
        elif not np.any(s > 0):
            inner = np.ones_like(z)
            extra = True
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                inner = np.where(s > 0, ndtr((vbar + z / dt) / np.where(s > 0, s, 1.0)),
                                 (z + vbar * dt > 0).astype(float))
        crossing_level = -(z + vbar * dt)
    else:
        G = system.G(t, X, np.broadcast_to(u, X.shape[:-1] + u.shape))
        Gp = G[..., pos, :]
        Hp = constraint.hessian(X)[..., pos, :][..., :, pos]
        curv = 0.5 * np.einsum("...ij,...ik,...kj->...", Gp, Hp, Gp)
        sig = np.linalg.norm(np.einsum("...i,...ij->...j", a, Gp), axis=-1)
        zc = np.minimum(z, 0.0)
        nu = np.linspace(-spec.box_halfwidth_sigmas, spec.box_halfwidth_sigmas, spec.points(dim))
        w = np.exp(-0.5 * nu ** 2)
        w[[0, -1]] *= 0.5
        w /= w.sum()
        inner = np.empty_like(z)
        det = sig == 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            sd = np.where(s > 0, s, 1.0)
            exact_det = np.where(s > 0, ndtr((vbar + curv + z / dt) / sd), (z + (vbar + curv) * dt > 0))
        inner[det] = exact_det[det]
        if np.any(~det):
            hv = (vbar + curv)[~det][..., None] + s[~det][..., None] * nu
            vals = psi(zc[~det][..., None], hv, sig[~det][..., None], dt)
            inner[~det] = vals @ w
        if np.all(det) and not np.any(s > 0):
            inner = np.ones_like(z)
            extra = True
        elif np.all(det) and np.all(s > 0):
            inner = np.ones_like(z)
            arg = (vbar + curv + z / dt) / s
        crossing_level = -(z + (vbar + curv) * dt)

    if safe_set is not None:
        region = safe_set.max_value(X)
    else:
        region = z
    levels = [region]
    if extra:
        levels.append(crossing_level)
    branches = _branches(safe_set is not None, inner, np.ones_like(z), extra, arg)
    return quadrature.integrate(grid, np.stack(levels), branches)


def _full(system, constraint, mean, cov, t, dt, u, spec, safe_set):
    n = system.state_dim
    grid = quadrature.gaussian_grid(mean, cov, spec.points(n), spec.box_halfwidth_sigmas)
    X = grid.nodes
    U = np.broadcast_to(u, X.shape[:-1] + u.shape)
    lc = local_coefficients(system, constraint, t, X, U)
    extra = not np.any(lc.sigma > 0)
    if extra:
        inner = np.ones_like(lc.z)
    else:
        inner = psi(np.minimum(lc.z, 0.0), lc.h, lc.sigma, dt)
    region = safe_set.max_value(X) if safe_set is not None else lc.z
    levels = [region]
    if extra:
        levels.append(-(lc.z + lc.h * dt))
    branches = _branches(safe_set is not None, inner, np.ones_like(lc.z), extra)
    return quadrature.integrate(grid, np.stack(levels), branches)


def interval_exit_terms(system: ItoSystem, safe_set: SafeSet, belief, t_i: float, t_next: float,
                        spec: QuadratureSpec = QuadratureSpec(), mode: str = "plain", control=None) -> np.ndarray:
    """Per-constraint interval exit probabilities (union-bound summands)."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    weight_set = safe_set if mode == "safe_weighted" else None
    return np.array([interval_exit_prob_constraint(system, c, belief, t_i, t_next, spec, weight_set, control)
                     for c in safe_set], dtype=float)


def interval_exit_prob(system: ItoSystem, safe_set: SafeSet, belief, t_i: float, t_next: float,
                       spec: QuadratureSpec = QuadratureSpec(), mode: str = "plain", control=None) -> float:
    """Union bound over constraints, clamped to ``[0, 1]``."""
    terms = interval_exit_terms(system, safe_set, belief, t_i, t_next, spec, mode, control)
    return float(min(1.0, max(0.0, terms.sum())))
