"""Failure-probability estimates over a time partition.

``dt_booles``   sum over grid times of P(x(t_i) unsafe)
``dt_gauss``    the same, with the belief conditioned on prior-step safety
                (survival-product accounting)
``ival_gauss``  interval exit probabilities against the conditioned belief,
                weighted by the mass retained so far
``ival_safe``   interval exit probabilities against the a-priori belief
                restricted to the safe set
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr

from . import quadrature
from .belief import (DegenerateTruncationError, GaussianBelief, LqgDesign, _Propagator, apriori_beliefs,
                     condition_sequence)
from .exit_kernel import QuadratureSpec, interval_exit_terms
from .monte_carlo import thread_count
from .sde_models import ItoSystem, SafeSet

METHODS = ("dt_booles", "dt_gauss", "ival_gauss", "ival_safe")
INITIAL_SAFETY_TOL = 1e-6


class InitialSafetyError(ValueError):
    pass


@dataclass(frozen=True)
class TimePartition:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("a partition needs at least two times")
        if t[0] != 0.0:
            raise ValueError("partition must start at 0")
        if not np.all(np.diff(t) > 0):
            raise ValueError("partition times must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, horizon: float, step: float) -> "TimePartition":
        """Steps of ``step`` seconds; the last one is shortened to land on ``horizon``."""
        if not (horizon > 0 and step > 0):
            raise ValueError("horizon and step must be positive")
        k = horizon / step
        kr = round(k)
        if abs(k - kr) < 1e-9 * max(1.0, k):
            return cls(np.linspace(0.0, horizon, int(kr) + 1))
        t = np.arange(0.0, horizon, step)
        return cls(np.append(t, horizon))

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def num_intervals(self) -> int:
        return self.times.size - 1


@dataclass
class RiskReport:
    """``per_interval[i]`` covers ``[t_lo[i], t_hi[i]]``; discrete-time methods use points (lo == hi)."""

    method: str
    total: float
    per_interval: np.ndarray
    per_constraint: np.ndarray
    partition: TimePartition
    t_lo: np.ndarray
    t_hi: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def cumulative(self) -> np.ndarray:
        return np.minimum(1.0, np.cumsum(self.per_interval))

    @property
    def raw_total(self) -> float:
        return float(self.per_interval.sum())


def _report(method, per_constraint, partition, lo, hi, diagnostics=None):
    per_constraint = np.asarray(per_constraint, dtype=float).reshape(len(lo), -1)
    per_interval = per_constraint.sum(axis=1) if per_constraint.size else np.zeros(len(lo))
    total = float(min(1.0, per_interval.sum()))
    return RiskReport(method, total, per_interval, per_constraint, partition, np.asarray(lo, float),
                      np.asarray(hi, float), diagnostics or {})


def violation_probabilities(system: ItoSystem, safe_set: SafeSet, belief: GaussianBelief,
                            spec: QuadratureSpec = QuadratureSpec()) -> np.ndarray:
    """``P(g_j(x) > 0)`` for each constraint under the belief's state marginal."""
    mean, cov = belief.state_mean, belief.state_cov
    out = np.empty(len(safe_set))
    for j, c in enumerate(safe_set):
        if c.linear:
            a = c.gradient(mean)
            gm = float(c.g(mean))
            s = float(np.sqrt(max(a @ cov @ a, 0.0)))
            out[j] = float(gm > 0) if s == 0 else float(ndtr(gm / s))
            continue
        if c.workspace_support is not None:
            idx = list(c.workspace_support)
        else:
            idx = list(range(system.state_dim))
        grid = quadrature.gaussian_grid(mean[idx], cov[np.ix_(idx, idx)], spec.points(len(idx)),
                                        spec.box_halfwidth_sigmas)
        X = np.zeros(grid.nodes.shape[:-1] + (system.state_dim,))
        X[..., idx] = grid.nodes
        out[j] = quadrature.integrate(grid, c.g(X)[None], [(lambda ins: ~ins[0], np.ones(grid.shape))])
    return out


def check_initial_safety(system, safe_set, belief, tol: float = INITIAL_SAFETY_TOL) -> float:
    p = float(violation_probabilities(system, safe_set, belief).sum())
    if p >= tol:
        raise InitialSafetyError(f"initial belief violates the safe set with probability {p:.3e} (>= {tol:g})")
    return p


def _map(fn, items, threads):
    n = thread_count(threads)
    if n > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _check_aligned(beliefs, partition):
    if len(beliefs) != partition.times.size:
        raise ValueError(f"{len(beliefs)} beliefs for {partition.times.size} partition times")
    for b, t in zip(beliefs, partition.times):
        if abs(b.time - t) > 1e-9:
            raise ValueError(f"belief at t={b.time} misaligned with partition time {t}")


def _control_at(design: Optional[LqgDesign], t: float, m: int):
    if design is None:
        return np.zeros(m)
    k = min(int(np.floor(t / design.dt + 1e-9)), design.num_ticks - 1)
    return design.nominal_controls[k]


def estimate_dt_booles(system: ItoSystem, safe_set: SafeSet, beliefs, partition: TimePartition,
                       spec: QuadratureSpec = QuadratureSpec(), threads: Optional[int] = None) -> RiskReport:
    _check_aligned(beliefs, partition)
    rows = _map(lambda b: violation_probabilities(system, safe_set, b, spec), list(beliefs), threads)
    t = partition.times
    return _report("dt_booles", np.array(rows), partition, t, t)


def estimate_ival_safe(system: ItoSystem, safe_set: SafeSet, beliefs, partition: TimePartition,
                       spec: QuadratureSpec = QuadratureSpec(), design: Optional[LqgDesign] = None,
                       threads: Optional[int] = None) -> RiskReport:
    _check_aligned(beliefs, partition)
    t = partition.times

    def term(i):
        u = _control_at(design, t[i], system.control_dim)
        return interval_exit_terms(system, safe_set, beliefs[i], t[i], t[i + 1], spec, "safe_weighted", u)

    rows = _map(term, list(range(partition.num_intervals)), threads)
    return _report("ival_safe", np.array(rows), partition, t[:-1], t[1:])


def _anthropic(system, safe_set, design, initial, partition, on_step):
    """Drive the conditioned-belief recursion; ``on_step(i, belief, survival)`` after each conditioning."""
    prop = _Propagator(system, design)
    m = len(safe_set)
    times = partition.times
    rows = np.zeros((times.size, m))
    masses = np.ones(times.size)
    survival = 1.0
    b = initial
    degenerate_at = None
    for i, t in enumerate(times):
        if i > 0:
            b = prop.propagate(b, float(t))
        try:
            b, ms = condition_sequence(b, safe_set)
        except DegenerateTruncationError:
            # almost surely unsafe: the remaining survival is booked on the first constraint
            rows[i, 0] += survival
            masses[i] = 0.0
            survival = 0.0
            degenerate_at = float(t)
            break
        for j, mj in enumerate(ms):
            rows[i, j] = survival * (1.0 - mj)
            survival *= mj
        masses[i] = float(np.prod(ms)) if ms else 1.0
        on_step(i, b, survival)
    diag = {"mass": masses}
    if degenerate_at is not None:
        diag["degenerate_at"] = degenerate_at
    return rows, diag


def estimate_dt_gauss(system: ItoSystem, safe_set: SafeSet, design: LqgDesign, initial_belief: GaussianBelief,
                      partition: TimePartition, spec: QuadratureSpec = QuadratureSpec()) -> RiskReport:
    rows, diag = _anthropic(system, safe_set, design, initial_belief, partition, lambda *a: None)
    t = partition.times
    return _report("dt_gauss", rows, partition, t, t, diag)


def estimate_ival_gauss(system: ItoSystem, safe_set: SafeSet, design: LqgDesign, initial_belief: GaussianBelief,
                        partition: TimePartition, spec: QuadratureSpec = QuadratureSpec()) -> RiskReport:
    t = partition.times
    k = partition.num_intervals
    rows = np.zeros((k, len(safe_set)))

    def on_step(i, belief, survival):
        if i < k and survival > 0:
            u = _control_at(design, t[i], system.control_dim)
            rows[i] = survival * interval_exit_terms(system, safe_set, belief, t[i], t[i + 1], spec, "plain", u)

    _, diag = _anthropic(system, safe_set, design, initial_belief, partition, on_step)
    if "degenerate_at" in diag:
        i = int(np.searchsorted(t, diag["degenerate_at"]))
        # the remaining survival mass is counted as failing in the interval that ends there
        rows[max(i - 1, 0), 0] += float(np.prod(diag["mass"][:i]))
    return _report("ival_gauss", rows, partition, t[:-1], t[1:], diag)


def run_method(method: str, system: ItoSystem, safe_set: SafeSet, design: LqgDesign, partition: TimePartition,
               spec: QuadratureSpec = QuadratureSpec(), initial: Optional[GaussianBelief] = None,
               beliefs=None, threads: Optional[int] = None) -> RiskReport:
    """Convenience dispatcher; a-priori beliefs are built on demand."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    initial = design.initial_belief() if initial is None else initial
    check_initial_safety(system, safe_set, initial)
    if method in ("dt_booles", "ival_safe") and beliefs is None:
        beliefs = apriori_beliefs(system, design, initial, partition.times)
    if method == "dt_booles":
        return estimate_dt_booles(system, safe_set, beliefs, partition, spec, threads)
    if method == "ival_safe":
        return estimate_ival_safe(system, safe_set, beliefs, partition, spec, design, threads)
    if method == "dt_gauss":
        return estimate_dt_gauss(system, safe_set, design, initial, partition, spec)
    return estimate_ival_gauss(system, safe_set, design, initial, partition, spec)
