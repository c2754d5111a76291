"""Continuous-time stochastic systems and the constraints that bound them.

All callables are vectorised over leading axes: a drift receives states of
shape ``(..., n_x)`` and controls of shape ``(..., n_u)`` and returns
``(..., n_x)``.  Constraint functions follow the same convention and always
take full state vectors, even when they only depend on position.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class SingularPointError(ValueError):
    """Raised when a constraint is evaluated where its gradient is undefined."""


@dataclass(frozen=True)
class ItoSystem:
    """``dx = f(t, x, u) dt + G(t, x, u) dw`` with full-state noisy observations.

    ``position_indices``/``velocity_indices`` mark the integrator structure
    ``dp = v dt + G_p dw`` that the reduced quadratures rely on.  They may be
    left empty for systems without that structure.
    """

    name: str
    state_dim: int
    control_dim: int
    noise_dim: int
    drift: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    diffusion: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    observation_noise_cov: np.ndarray
    control_rate_hz: float
    position_indices: tuple[int, ...] = ()
    velocity_indices: tuple[int, ...] = ()
    jacobians: Optional[Callable[[float, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        R = np.asarray(self.observation_noise_cov, dtype=float)
        if R.shape != (self.state_dim, self.state_dim):
            raise ValueError(f"observation_noise_cov must be {self.state_dim}x{self.state_dim}, got {R.shape}")
        if not np.allclose(R, R.T, atol=1e-12):
            raise ValueError("observation_noise_cov must be symmetric")
        if np.linalg.eigvalsh(R).min() < -1e-12:
            raise ValueError("observation_noise_cov must be positive semidefinite")
        if self.control_rate_hz <= 0:
            raise ValueError("control_rate_hz must be positive")
        R.setflags(write=False)
        object.__setattr__(self, "observation_noise_cov", R)

    @property
    def control_dt(self) -> float:
        return 1.0 / self.control_rate_hz

    def G(self, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Diffusion matrix with its shape checked."""
        G = np.asarray(self.diffusion(t, x, u), dtype=float)
        if G.shape[-2:] != (self.state_dim, self.noise_dim):
            raise ValueError(f"diffusion returned shape {G.shape}, expected (..., {self.state_dim}, {self.noise_dim})")
        return G

    def linearize(self, t: float, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Continuous-time Jacobians ``(df/dx, df/du)`` at a single point."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.jacobians is not None:
            A, B = self.jacobians(t, x, u)
            return np.asarray(A, dtype=float), np.asarray(B, dtype=float)
        return _fd_jacobians(self.drift, t, x, u)

    def is_locally_deterministic(self, t: float = 0.0, x=None, u=None) -> bool:
        """True when no noise enters the position rows directly."""
        if not self.position_indices:
            return False
        x = np.zeros(self.state_dim) if x is None else x
        u = np.zeros(self.control_dim) if u is None else u
        G = self.G(t, x, u)
        return bool(np.all(G[list(self.position_indices), :] == 0.0))


def _fd_jacobians(f, t, x, u, eps=1e-6):
    n, m = x.size, u.size
    A = np.empty((n, n))
    B = np.empty((n, m))
    for i in range(n):
        d = np.zeros(n)
        d[i] = eps
        A[:, i] = (f(t, x + d, u) - f(t, x - d, u)) / (2 * eps)
    for i in range(m):
        d = np.zeros(m)
        d[i] = eps
        B[:, i] = (f(t, x, u + d) - f(t, x, u - d)) / (2 * eps)
    return A, B


def integrate_noiseless(system: ItoSystem, t: float, x: np.ndarray, u: np.ndarray, duration: float,
                        max_step: float = 1.0 / 600.0) -> np.ndarray:
    """RK4 flow of the drift with the control held fixed."""
    x = np.array(x, dtype=float)
    if duration <= 0:
        return x
    steps = max(1, int(np.ceil(duration / max_step - 1e-9)))
    h = duration / steps
    f = system.drift
    for s in range(steps):
        ts = t + s * h
        k1 = f(ts, x, u)
        k2 = f(ts + h / 2, x + h / 2 * k1, u)
        k3 = f(ts + h / 2, x + h / 2 * k2, u)
        k4 = f(ts + h, x + h * k3, u)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def dubins_system(noise_scale: float = 0.05, obs_noise_var: float = 1e-4,
                  control_rate_hz: float = 60.0) -> ItoSystem:
    """Second-order Dubin's car, state ``(px, py, vx, vy, theta, omega)``.

    Controls are forward thrust ``c`` and angular acceleration ``alpha``.
    The noise matrix is ``noise_scale * [0; I2 0 0; 0 0.1 0; 0 0 1]``
    (6 x 4), so velocities, heading and angular rate are perturbed while
    positions are locally deterministic.
    """
    if not noise_scale > 0:
        raise ValueError("noise_scale must be positive")
    if obs_noise_var < 0:
        raise ValueError("obs_noise_var must be non-negative")

    G = np.zeros((6, 4))
    G[2, 0] = G[3, 1] = 1.0
    G[4, 2] = 0.1
    G[5, 3] = 1.0
    G *= noise_scale
    G.setflags(write=False)

    def drift(t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        th = x[..., 4]
        c = u[..., 0]
        out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (6,)))
        out[..., 0] = x[..., 2]
        out[..., 1] = x[..., 3]
        out[..., 2] = c * np.cos(th)
        out[..., 3] = c * np.sin(th)
        out[..., 4] = x[..., 5]
        out[..., 5] = u[..., 1]
        return out

    def diffusion(t, x, u):
        return np.broadcast_to(G, np.shape(x)[:-1] + G.shape)

    def jacobians(t, x, u):
        th, c = x[4], u[0]
        A = np.zeros((6, 6))
        A[0, 2] = A[1, 3] = 1.0
        A[2, 4] = -c * np.sin(th)
        A[3, 4] = c * np.cos(th)
        A[4, 5] = 1.0
        B = np.zeros((6, 2))
        B[2, 0] = np.cos(th)
        B[3, 0] = np.sin(th)
        B[5, 1] = 1.0
        return A, B

    return ItoSystem(
        name="dubins", state_dim=6, control_dim=2, noise_dim=4,
        drift=drift, diffusion=diffusion,
        observation_noise_cov=obs_noise_var * np.eye(6),
        control_rate_hz=control_rate_hz,
        position_indices=(0, 1), velocity_indices=(2, 3),
        jacobians=jacobians,
        params=dict(noise_scale=noise_scale, obs_noise_var=obs_noise_var, control_rate_hz=control_rate_hz),
    )


def double_integrator_1d(noise: float = 0.1, obs_noise_var: float = 1e-4,
                         control_rate_hz: float = 60.0) -> ItoSystem:
    """``dp = v dt``, ``dv = u dt + noise dw``."""
    if not noise > 0:
        raise ValueError("noise must be positive")
    G = np.array([[0.0], [noise]])
    G.setflags(write=False)

    def drift(t, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (2,)))
        out[..., 0] = x[..., 1]
        out[..., 1] = u[..., 0]
        return out

    def diffusion(t, x, u):
        return np.broadcast_to(G, np.shape(x)[:-1] + G.shape)

    def jacobians(t, x, u):
        return np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([[0.0], [1.0]])

    return ItoSystem(
        name="double_integrator_1d", state_dim=2, control_dim=1, noise_dim=1,
        drift=drift, diffusion=diffusion,
        observation_noise_cov=obs_noise_var * np.eye(2),
        control_rate_hz=control_rate_hz,
        position_indices=(0,), velocity_indices=(1,),
        jacobians=jacobians,
        params=dict(noise=noise, obs_noise_var=obs_noise_var, control_rate_hz=control_rate_hz),
    )


def brownian_1d(drift: float = 0.0, sigma: float = 1.0, obs_noise_var: float = 0.0,
                control_rate_hz: float = 60.0) -> ItoSystem:
    """Scalar Brownian motion with constant drift; the control is ignored."""
    G = np.array([[float(sigma)]])
    G.setflags(write=False)
    h = float(drift)

    def f(t, x, u):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape, h)

    def diffusion(t, x, u):
        return np.broadcast_to(G, np.shape(x)[:-1] + G.shape)

    def jacobians(t, x, u):
        return np.zeros((1, 1)), np.zeros((1, 1))

    return ItoSystem(
        name="brownian_1d", state_dim=1, control_dim=1, noise_dim=1,
        drift=f, diffusion=diffusion,
        observation_noise_cov=obs_noise_var * np.eye(1),
        control_rate_hz=control_rate_hz,
        position_indices=(0,),
        jacobians=jacobians,
        params=dict(drift=h, sigma=float(sigma)),
    )


@dataclass(frozen=True)
class Constraint:
    """Smooth inequality ``g(x) <= 0``; ``kind``/``params`` allow round-tripping."""

    g: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    workspace_support: Optional[tuple[int, ...]] = None
    linear: bool = False
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"type": self.kind, **{k: (list(v) if isinstance(v, (tuple, list, np.ndarray)) else v)
                                      for k, v in self.params.items()}}


def circle_obstacle(center: Sequence[float], radius: float,
                    position_indices: Sequence[int] = (0, 1)) -> Constraint:
    """Disk obstacle as the signed distance ``radius - ||p - center||``."""
    c = np.asarray(center, dtype=float)
    idx = tuple(int(i) for i in position_indices)
    if c.shape != (len(idx),):
        raise ValueError("center dimension must match position_indices")
    if not radius > 0:
        raise ValueError("radius must be positive")
    r = float(radius)

    def _offset(x):
        d = np.asarray(x, dtype=float)[..., list(idx)] - c
        n = np.linalg.norm(d, axis=-1)
        return d, n

    def g(x):
        _, n = _offset(x)
        return r - n

    def gradient(x):
        x = np.asarray(x, dtype=float)
        d, n = _offset(x)
        if np.any(n == 0.0):
            raise SingularPointError("circle constraint gradient undefined at the obstacle center")
        out = np.zeros(x.shape)
        out[..., list(idx)] = -d / n[..., None]
        return out

    def hessian(x):
        x = np.asarray(x, dtype=float)
        d, n = _offset(x)
        if np.any(n == 0.0):
            raise SingularPointError("circle constraint hessian undefined at the obstacle center")
        k = len(idx)
        u = d / n[..., None]
        block = -(np.eye(k) - u[..., :, None] * u[..., None, :]) / n[..., None, None]
        out = np.zeros(x.shape + (x.shape[-1],))
        ii = np.ix_(idx, idx)
        out[(Ellipsis,) + ii] = block
        return out

    return Constraint(g, gradient, hessian, workspace_support=idx, linear=False, kind="circle",
                      params=dict(center=tuple(c.tolist()), radius=r))


def halfplane_constraint(normal: Sequence[float], offset: float,
                         position_indices: Sequence[int] = (0, 1)) -> Constraint:
    """Linear wall ``normal . p - offset <= 0``."""
    a = np.asarray(normal, dtype=float)
    idx = tuple(int(i) for i in position_indices)
    if a.shape != (len(idx),):
        raise ValueError("normal dimension must match position_indices")
    if not np.linalg.norm(a) > 0:
        raise ValueError("normal must be nonzero")
    b = float(offset)

    def g(x):
        return np.asarray(x, dtype=float)[..., list(idx)] @ a - b

    def gradient(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        out[..., list(idx)] = a
        return out

    def hessian(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (x.shape[-1],))

    return Constraint(g, gradient, hessian, workspace_support=idx, linear=True, kind="halfplane",
                      params=dict(normal=tuple(a.tolist()), offset=b))


def constraint_from_dict(spec: dict, position_indices: Sequence[int] = (0, 1)) -> Constraint:
    kind = spec.get("type")
    if kind == "circle":
        return circle_obstacle(spec["center"], spec["radius"], position_indices)
    if kind == "halfplane":
        return halfplane_constraint(spec["normal"], spec["offset"], position_indices)
    raise ValueError(f"unknown obstacle type {kind!r}")


@dataclass(frozen=True)
class SafeSet:
    """Intersection of constraint sublevel sets."""

    constraints: tuple[Constraint, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))

    def __len__(self):
        return len(self.constraints)

    def __iter__(self):
        return iter(self.constraints)

    def values(self, x: np.ndarray) -> np.ndarray:
        """Stacked ``g_j(x)`` with the constraint index last."""
        x = np.asarray(x, dtype=float)
        if not self.constraints:
            return np.zeros(x.shape[:-1] + (0,))
        return np.stack([c.g(x) for c in self.constraints], axis=-1)

    def max_value(self, x: np.ndarray) -> np.ndarray:
        v = self.values(x)
        if v.shape[-1] == 0:
            return np.full(v.shape[:-1], -np.inf)
        return v.max(axis=-1)

    def contains(self, x: np.ndarray) -> np.ndarray:
        return self.max_value(x) <= 0.0


@dataclass(frozen=True)
class FeedbackPolicy:
    """Nominal plan on the control grid plus tracking/estimation gains.

    ``nominal_states`` has one more row than ``nominal_controls``.  The
    applied control is ``u_nom[k] - gains[k] @ (xhat - x_nom[k])``.
    """

    nominal_states: np.ndarray
    nominal_controls: np.ndarray
    gains: Optional[np.ndarray] = None
    estimator_gains: Optional[np.ndarray] = None

    def __post_init__(self):
        xs = np.asarray(self.nominal_states, dtype=float)
        us = np.asarray(self.nominal_controls, dtype=float)
        if xs.ndim != 2 or us.ndim != 2 or xs.shape[0] != us.shape[0] + 1:
            raise ValueError("nominal_states must have exactly one more row than nominal_controls")
        for name, arr in (("gains", self.gains), ("estimator_gains", self.estimator_gains)):
            if arr is not None and np.asarray(arr).shape[0] != us.shape[0]:
                raise ValueError(f"{name} length must equal the number of control ticks")
        object.__setattr__(self, "nominal_states", xs)
        object.__setattr__(self, "nominal_controls", us)

    @property
    def num_ticks(self) -> int:
        return self.nominal_controls.shape[0]

    def check_horizon(self, control_rate_hz: float, horizon: float) -> None:
        expected = int(round(horizon * control_rate_hz))
        if self.num_ticks != expected:
            raise ValueError(f"nominal covers {self.num_ticks} ticks, horizon needs {expected}")
