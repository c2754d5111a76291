"""Closed-loop Monte-Carlo rollouts: the ground-truth failure probability.

Each rollout simulates the true state with Euler-Maruyama, observes
``y_k = x(t_k) + nu`` at every control tick, runs the Kalman update with the
design's gains, applies ``u = u_nom - K (xhat - x_nom)`` as a zero-order
hold and predicts the estimate through the noiseless model.  An exit is the
first substep at which any constraint is positive.

Rollout ``i`` draws all of its noise from a Philox stream keyed by
``(seed, i)``, and rollouts are simulated in fixed-size blocks, so results do
not depend on how many worker threads are used.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .belief import LqgDesign
from .sde_models import FeedbackPolicy, ItoSystem, SafeSet

BLOCK = 64


class SimulationBlowupError(RuntimeError):
    def __init__(self, rollout_index: int, message: str = "non-finite state"):
        super().__init__(f"rollout {rollout_index}: {message}")
        self.rollout_index = rollout_index


@dataclass(frozen=True)
class McConfig:
    num_rollouts: int = 1000
    sim_substeps_per_control_tick: int = 10
    rng_seed: int = 0
    exit_check: str = "every_substep"

    def __post_init__(self):
        if self.num_rollouts < 1:
            raise ValueError("num_rollouts must be >= 1")
        if self.sim_substeps_per_control_tick < 1:
            raise ValueError("sim_substeps_per_control_tick must be >= 1")
        if not 0 <= int(self.rng_seed) < 2 ** 64:
            raise ValueError("rng_seed must fit in 64 bits")
        if self.exit_check != "every_substep":
            raise ValueError("only every_substep exit checking is supported")


@dataclass
class RolloutOutcome:
    exited: bool
    exit_time: Optional[float]
    exit_constraint: Optional[int]
    final_state: np.ndarray


@dataclass
class McResult:
    estimate: float
    standard_error: float
    num_rollouts: int
    exit_times: np.ndarray
    exit_constraints: np.ndarray
    partition: np.ndarray
    first_exit_times: np.ndarray
    exit_constraint_counts: np.ndarray
    cumulative_curve: np.ndarray
    config: McConfig = field(default_factory=McConfig)


def thread_count(threads: Optional[int] = None) -> int:
    if threads is not None:
        return max(1, int(threads))
    try:
        return max(1, int(os.environ.get("EXITRISK_THREADS", "1")))
    except ValueError:
        return 1


def _psd_sqrt(C):
    C = np.asarray(C, dtype=float)
    lam, V = np.linalg.eigh(0.5 * (C + C.T))
    return V * np.sqrt(np.clip(lam, 0.0, None))


def _noise(seed: int, index: int, size: int) -> np.ndarray:
    bitgen = np.random.Philox(key=np.array([seed, index], dtype=np.uint64))
    return np.random.Generator(bitgen).standard_normal(size)


def simulate_block(system: ItoSystem, safe_set: SafeSet, policy: FeedbackPolicy, design: LqgDesign,
                   config: McConfig, indices: Sequence[int]):
    """Simulate rollouts ``indices`` together; returns exit times (inf = none), exit constraints, final states."""
    n, d = system.state_dim, system.noise_dim
    N = policy.num_ticks
    S = config.sim_substeps_per_control_tick
    dt = system.control_dt
    h = dt / S
    sqh = np.sqrt(h)
    K = policy.gains if policy.gains is not None else design.lqr_gains
    L = policy.estimator_gains if policy.estimator_gains is not None else design.kalman_gains
    xs, us = policy.nominal_states, policy.nominal_controls
    B = len(indices)

    per = n + N * n + N * S * d
    raw = np.stack([_noise(int(config.rng_seed), int(i), per) for i in indices])
    z0 = raw[:, :n]
    obs = raw[:, n:n + N * n].reshape(B, N, n)
    dw = raw[:, n + N * n:].reshape(B, N, S, d)

    x = xs[0] + np.einsum("ij,bj->bi", _psd_sqrt(design.initial_cov), z0)
    xhat = np.broadcast_to(xs[0], (B, n)).copy()
    Rs = _psd_sqrt(system.observation_noise_cov)

    exit_time = np.full(B, np.inf)
    exit_con = np.full(B, -1, dtype=int)
    m = len(safe_set)

    def check(xc, t):
        if m == 0:
            return
        vals = safe_set.values(xc)
        bad = (vals.max(axis=-1) > 0.0) & ~np.isfinite(exit_time)
        if np.any(bad):
            exit_time[bad] = t
            exit_con[bad] = np.argmax(vals[bad], axis=-1)

    check(x, 0.0)
    for k in range(N):
        t0 = k * dt
        y = x + np.einsum("ij,bj->bi", Rs, obs[:, k])
        xhat = xhat + np.einsum("ij,bj->bi", L[k], y - xhat)
        u = us[k] - np.einsum("ij,bj->bi", K[k], xhat - xs[k])
        for s in range(S):
            ts = t0 + s * h
            G = system.G(ts, x, u)
            x = x + system.drift(ts, x, u) * h + np.einsum("bij,bj->bi", G, dw[:, k, s]) * sqh
            xhat = xhat + system.drift(ts, xhat, u) * h
            alive = ~np.isfinite(exit_time)
            if not np.all(np.isfinite(x[alive])):
                bad = np.flatnonzero(alive & ~np.all(np.isfinite(x), axis=-1))
                raise SimulationBlowupError(int(indices[bad[0]]))
            check(x, t0 + (s + 1) * h)
    return exit_time, exit_con, x


def rollout(system: ItoSystem, safe_set: SafeSet, policy: FeedbackPolicy, design: LqgDesign, horizon: float,
            config: McConfig, rollout_index: int) -> RolloutOutcome:
    policy.check_horizon(system.control_rate_hz, horizon)
    et, ec, xf = simulate_block(system, safe_set, policy, design, config, [rollout_index])
    exited = bool(np.isfinite(et[0]))
    return RolloutOutcome(exited, float(et[0]) if exited else None, int(ec[0]) if exited else None, xf[0])


def estimate_mc(system: ItoSystem, safe_set: SafeSet, policy: FeedbackPolicy, design: LqgDesign, horizon: float,
                partition, config: McConfig = McConfig(), threads: Optional[int] = None) -> McResult:
    """Aggregate ``config.num_rollouts`` rollouts into a failure-probability estimate."""
    policy.check_horizon(system.control_rate_hz, horizon)
    partition = np.asarray(partition, dtype=float)
    blocks = [list(range(s, min(s + BLOCK, config.num_rollouts))) for s in range(0, config.num_rollouts, BLOCK)]
    run = lambda idx: simulate_block(system, safe_set, policy, design, config, idx)
    nthreads = thread_count(threads)
    if nthreads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            results = list(pool.map(run, blocks))
    else:
        results = [run(b) for b in blocks]
    times = np.concatenate([r[0] for r in results])
    cons = np.concatenate([r[1] for r in results])

    N = config.num_rollouts
    exited = np.isfinite(times)
    p = exited.sum() / N
    se = float(np.sqrt(p * (1 - p) / N))
    # an exit at t belongs to the interval (t_lo, t_hi]; t = 0 goes to the first
    idx = np.clip(np.searchsorted(partition, times[exited], side="left") - 1, 0, len(partition) - 2)
    hist = np.bincount(idx, minlength=len(partition) - 1)
    ccount = np.bincount(cons[exited], minlength=len(safe_set)) if len(safe_set) else np.zeros(0, dtype=int)
    cum = np.array([(times <= t + 1e-12).sum() for t in partition]) / N
    cum[-1] = p
    return McResult(estimate=float(p), standard_error=se, num_rollouts=N, exit_times=times,
                    exit_constraints=cons, partition=partition, first_exit_times=hist,
                    exit_constraint_counts=ccount, cumulative_curve=cum, config=config)
