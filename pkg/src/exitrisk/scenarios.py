"""Scenario files, nominal plan synthesis and random batch generation.

A scenario file is JSON with top-level keys ``system``, ``obstacles``,
``initial``, ``goal``, ``horizon_s``, ``partition_hz``, ``nominal`` and
``risk_tolerance`` (plus an optional ``lqg`` block).  Lengths are metres,
times seconds, angles radians.  See README.md for the full schema.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np

from .belief import GaussianBelief, LqgDesign, design_lqg
from .estimators import INITIAL_SAFETY_TOL, TimePartition, violation_probabilities
from .monte_carlo import McConfig, estimate_mc, thread_count
from .sde_models import (FeedbackPolicy, ItoSystem, SafeSet, constraint_from_dict, double_integrator_1d,
                         dubins_system, integrate_noiseless)

SYSTEM_IDS = ("dubins", "double_integrator_1d")
INTERESTING_RISK = 0.01
PROBE_ROLLOUTS = 100

DEFAULT_LQG = {
    "dubins": {"q": [20.0, 20.0, 4.0, 4.0, 2.0, 0.2], "r": [1.0, 1.0]},
    "double_integrator_1d": {"q": [20.0, 4.0], "r": [1.0]},
}


class ScenarioError(ValueError):
    """Invalid scenario content; ``check`` names the failed validation."""

    def __init__(self, check: str, message: str):
        super().__init__(f"[{check}] {message}")
        self.check = check


class NominalInCollisionError(ScenarioError):
    def __init__(self, message: str):
        super().__init__("nominal_collision_free", message)


class TemplateInfeasibleError(RuntimeError):
    pass


def _floats(v, name, length=None):
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError("type", f"{name} must be numeric")
    if length is not None and arr.shape != (length,):
        raise ScenarioError("shape", f"{name} must have length {length}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ScenarioError("finite", f"{name} must be finite")
    return arr


@dataclass
class Scenario:
    system_id: str
    system_params: dict
    obstacles: list
    initial_mean: np.ndarray
    initial_cov: np.ndarray
    goal: np.ndarray
    horizon: float
    partition_hz: float
    nominal: dict = field(default_factory=lambda: {"type": "straight"})
    risk_tolerance: Optional[float] = None
    lqg: Optional[dict] = None
    name: str = "scenario"

    def __post_init__(self):
        self.initial_mean = np.asarray(self.initial_mean, dtype=float)
        self.initial_cov = np.asarray(self.initial_cov, dtype=float)
        self.goal = np.atleast_1d(np.asarray(self.goal, dtype=float))

    @cached_property
    def system(self) -> ItoSystem:
        p = dict(self.system_params)
        if self.system_id == "dubins":
            return dubins_system(p.get("noise_scale", 0.05), p.get("obs_noise_var", 1e-4),
                                 p.get("control_rate_hz", 60.0))
        if self.system_id == "double_integrator_1d":
            return double_integrator_1d(p.get("noise", 0.1), p.get("obs_noise_var", 1e-4),
                                        p.get("control_rate_hz", 60.0))
        raise ScenarioError("system", f"unknown system id {self.system_id!r}")

    @cached_property
    def safe_set(self) -> SafeSet:
        pos = self.system.position_indices
        return SafeSet(tuple(constraint_from_dict(o, pos) for o in self.obstacles))

    @cached_property
    def policy(self) -> FeedbackPolicy:
        return synthesize_nominal(self)

    @cached_property
    def design(self) -> LqgDesign:
        w = dict(DEFAULT_LQG[self.system_id])
        w.update(self.lqg or {})
        return design_lqg(self.system, self.policy, w["q"], w["r"], self.horizon, initial_cov=self.initial_cov,
                          terminal_weights=w.get("qf"))

    @property
    def initial_belief(self) -> GaussianBelief:
        return GaussianBelief.from_state(self.initial_mean, self.initial_cov, 0.0)

    def partition(self, step: Optional[float] = None) -> TimePartition:
        return TimePartition.uniform(self.horizon, 1.0 / self.partition_hz if step is None else step)

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "system": {"id": self.system_id, **self.system_params},
            "obstacles": [dict(o) for o in self.obstacles],
            "initial": {"mean": self.initial_mean.tolist(), "cov": self.initial_cov.tolist()},
            "goal": self.goal.tolist(),
            "horizon_s": self.horizon,
            "partition_hz": self.partition_hz,
            "nominal": self.nominal,
            "risk_tolerance": self.risk_tolerance,
        }
        if self.lqg is not None:
            d["lqg"] = self.lqg
        return d

    def validate(self) -> "Scenario":
        sys = self.system
        n = sys.state_dim
        if not self.horizon > 0:
            raise ScenarioError("horizon_positive", f"horizon_s must be > 0, got {self.horizon}")
        if not self.partition_hz > 0:
            raise ScenarioError("partition_hz_positive", f"partition_hz must be > 0, got {self.partition_hz}")
        ticks = self.horizon * sys.control_rate_hz
        if abs(ticks - round(ticks)) > 1e-6:
            raise ScenarioError("horizon_on_control_grid", "horizon_s must be a whole number of control ticks")
        if self.initial_mean.shape != (n,):
            raise ScenarioError("initial_shape", f"initial.mean must have length {n}")
        if self.initial_cov.shape != (n, n):
            raise ScenarioError("initial_shape", f"initial.cov must be {n}x{n}")
        if not np.allclose(self.initial_cov, self.initial_cov.T) or np.linalg.eigvalsh(self.initial_cov).min() < -1e-12:
            raise ScenarioError("initial_cov_psd", "initial.cov must be symmetric PSD")
        if self.goal.shape != (len(sys.position_indices),):
            raise ScenarioError("goal_shape", "goal must be a workspace point")
        if self.risk_tolerance is not None and not 0 < self.risk_tolerance < 1:
            raise ScenarioError("risk_tolerance_range", "risk_tolerance must lie in (0, 1)")
        try:
            safe = self.safe_set
        except (ValueError, KeyError, TypeError) as exc:
            raise ScenarioError("obstacles", str(exc))
        if len(safe) and bool(np.any(safe.values(self.initial_mean) > 0)):
            raise ScenarioError("initial_safety", "initial mean lies inside an obstacle")
        p = float(violation_probabilities(sys, safe, self.initial_belief).sum()) if len(safe) else 0.0
        if p >= INITIAL_SAFETY_TOL:
            raise ScenarioError("initial_safety", f"P(x0 unsafe) = {p:.3e} >= {INITIAL_SAFETY_TOL:g}")
        return self


def _where(check, msg):
    raise ScenarioError(check, msg)


def scenario_from_dict(d: dict, name: str = "scenario") -> Scenario:
    required = ("system", "obstacles", "initial", "goal", "horizon_s", "partition_hz")
    for key in required:
        if key not in d:
            raise ScenarioError("missing_field", f"missing top-level field {key!r}")
    unknown = set(d) - set(required) - {"nominal", "risk_tolerance", "lqg", "name"}
    if unknown:
        raise ScenarioError("unknown_field", f"unknown top-level field(s) {sorted(unknown)}")
    system = dict(d["system"])
    sid = system.pop("id", None)
    if sid not in SYSTEM_IDS:
        raise ScenarioError("system", f"system.id must be one of {SYSTEM_IDS}, got {sid!r}")
    init = d["initial"]
    if "mean" not in init:
        raise ScenarioError("missing_field", "initial.mean is required")
    mean = _floats(init["mean"], "initial.mean")
    if "cov" in init:
        cov = _floats(init["cov"], "initial.cov")
    elif "std" in init:
        cov = np.diag(_floats(init["std"], "initial.std", mean.size) ** 2)
    else:
        raise ScenarioError("missing_field", "initial needs cov or std")
    obstacles = d["obstacles"]
    if not isinstance(obstacles, list):
        raise ScenarioError("type", "obstacles must be a list")
    for i, o in enumerate(obstacles):
        if not isinstance(o, dict) or o.get("type") not in ("circle", "halfplane"):
            raise ScenarioError("obstacles", f"obstacles[{i}] must be a circle or halfplane object")
    try:
        horizon = float(d["horizon_s"])
        hz = float(d["partition_hz"])
    except (TypeError, ValueError):
        raise ScenarioError("type", "horizon_s and partition_hz must be numbers")
    rt = d.get("risk_tolerance")
    return Scenario(
        system_id=sid, system_params=system, obstacles=[dict(o) for o in obstacles],
        initial_mean=mean, initial_cov=cov, goal=_floats(d["goal"], "goal"),
        horizon=horizon, partition_hz=hz, nominal=d.get("nominal", {"type": "straight"}),
        risk_tolerance=None if rt is None else float(rt), lqg=d.get("lqg"), name=d.get("name", name),
    )


def load_scenario(path) -> Scenario:
    """Parse and fully validate a scenario file."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError("parse", f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}")
    if not isinstance(d, dict):
        raise ScenarioError("parse", f"{path}: top level must be an object")
    return scenario_from_dict(d, name=path.stem).validate()


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario.to_dict(), indent=2) + "\n", encoding="utf-8")


# -- nominal synthesis -------------------------------------------------------

def _min_jerk(tau):
    tau = np.clip(tau, 0.0, 1.0)
    s = tau ** 3 * (10 - 15 * tau + 6 * tau ** 2)
    ds = 30 * tau ** 2 * (1 - tau) ** 2
    return s, ds


def _wrap(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


def _dubins_profile(start, theta0, points, horizon, speed, turn_rate):
    """Stop-turn-go template: rotate in place to face each leg, then traverse it."""
    phases = []
    heading = theta0
    cur = np.asarray(start, float)
    for p in points:
        p = np.asarray(p, float)
        d = p - cur
        length = float(np.linalg.norm(d))
        if length < 1e-9:
            continue
        want = math.atan2(d[1], d[0])
        dth = _wrap(want - heading)
        if abs(dth) > 1e-9:
            phases.append(("turn", abs(dth) / turn_rate, heading, dth))
        heading += dth
        phases.append(("move", length / speed, cur.copy(), d))
        cur = p
    if not phases:
        phases.append(("hold", 1.0, None, None))
    total = sum(ph[1] for ph in phases)
    scale = horizon / total

    def velocity_and_rate(t):
        acc = 0.0
        for kind, w, a, b in phases:
            dur = w * scale
            if t <= acc + dur + 1e-12:
                tau = (t - acc) / dur
                _, ds = _min_jerk(tau)
                if kind == "move":
                    return b * ds / dur, 0.0
                if kind == "turn":
                    return np.zeros(2), b * ds / dur
                return np.zeros(2), 0.0
            acc += dur
        return np.zeros(2), 0.0

    return velocity_and_rate


def synthesize_nominal(scenario: Scenario) -> FeedbackPolicy:
    """Kinematic template plan, integrated through the noiseless model.

    Controls are chosen tick by tick so that the zero-order-hold response
    reproduces the template's velocity (and angular rate) at every tick.
    The plan is rejected if any constraint is non-negative when sampled at
    ten times the control rate.
    """
    sys = scenario.system
    N = int(round(scenario.horizon * sys.control_rate_hz))
    dt = sys.control_dt
    nom = scenario.nominal or {"type": "straight"}
    kind = nom.get("type", "straight")
    x0 = scenario.initial_mean

    if kind == "explicit":
        xs = np.asarray(nom["states"], float)
        us = np.asarray(nom["controls"], float)
        policy = FeedbackPolicy(xs, us)
        policy.check_horizon(sys.control_rate_hz, scenario.horizon)
        _check_collision_free(scenario, policy)
        return policy

    if kind not in ("straight", "waypoints"):
        raise ScenarioError("nominal", f"unknown nominal type {kind!r}")
    waypoints = [np.asarray(w, float) for w in nom.get("waypoints", [])] if kind == "waypoints" else []
    targets = waypoints + [scenario.goal]
    pos = list(sys.position_indices)
    vel = list(sys.velocity_indices)
    if np.any(np.abs(x0[vel]) > 1e-9):
        raise ScenarioError("nominal", "template synthesis needs a zero initial velocity")

    if scenario.system_id == "dubins":
        if abs(x0[5]) > 1e-9:
            raise ScenarioError("nominal", "template synthesis needs a zero initial angular rate")
        profile = _dubins_profile(x0[pos], x0[4], targets, scenario.horizon,
                                  nom.get("speed", 1.0), nom.get("turn_rate", 2.0))
    else:
        start = x0[pos]
        legs = [start] + targets
        seg = [float(np.linalg.norm(b - a)) for a, b in zip(legs[:-1], legs[1:])]
        total = sum(seg) or 1.0
        bounds = np.concatenate([[0.0], np.cumsum(seg) / total * scenario.horizon])

        def profile(t):
            for i in range(len(seg)):
                if t <= bounds[i + 1] + 1e-12 and seg[i] > 0:
                    dur = bounds[i + 1] - bounds[i]
                    _, ds = _min_jerk((t - bounds[i]) / dur)
                    return (legs[i + 1] - legs[i]) * ds / dur, 0.0
            return np.zeros(len(pos)), 0.0

    xs = np.empty((N + 1, sys.state_dim))
    us = np.empty((N, sys.control_dim))
    xs[0] = x0
    for k in range(N):
        x = xs[k]
        v1, w1 = profile((k + 1) * dt)
        dv = np.asarray(v1) - x[vel]
        if scenario.system_id == "dubins":
            e = np.array([math.cos(x[4]), math.sin(x[4])])
            us[k] = [float(dv @ e) / dt, (w1 - x[5]) / dt]
        else:
            us[k] = dv / dt
        xs[k + 1] = integrate_noiseless(sys, k * dt, x, us[k], dt)
    policy = FeedbackPolicy(xs, us)
    _check_collision_free(scenario, policy)
    return policy


def _check_collision_free(scenario: Scenario, policy: FeedbackPolicy, oversample: int = 10) -> None:
    safe = scenario.safe_set
    if not len(safe):
        return
    sys = scenario.system
    dt = sys.control_dt
    worst = -np.inf
    for k in range(policy.num_ticks):
        x = policy.nominal_states[k]
        for s in range(oversample):
            xi = integrate_noiseless(sys, k * dt, x, policy.nominal_controls[k], s * dt / oversample)
            worst = max(worst, float(safe.max_value(xi)))
    worst = max(worst, float(safe.max_value(policy.nominal_states[-1])))
    if not worst < 0:
        raise NominalInCollisionError(f"nominal plan reaches max_j g_j = {worst:.4f} >= 0; supply waypoints")


# -- batch generation --------------------------------------------------------

@dataclass
class GeneratedBatch:
    seed: int
    count: int
    scenarios: list
    rejection_stats: dict
    probe_risk: list = field(default_factory=list)


def _candidate(template: dict, seed: int, index: int) -> Scenario:
    rng = np.random.default_rng([seed, index])
    base = dict(template["base"])
    spec = template["obstacles"]
    start = np.asarray(base["initial"]["mean"], float)[:2]
    goal = np.asarray(base["goal"], float)
    d = goal - start
    length = float(np.linalg.norm(d))
    along_dir = d / length
    normal = np.array([-along_dir[1], along_dir[0]])
    lo, hi = spec.get("count", [1, 3])
    count = int(rng.integers(lo, hi + 1))
    layout = spec.get("layout", "scatter")
    if layout not in ("scatter", "gates"):
        raise ScenarioError("template", f"unknown obstacle layout {layout!r}")
    circles = []
    if layout == "scatter":
        # independent circles beside the path, either side
        for _ in range(count):
            r = float(rng.uniform(*spec.get("radius", [0.2, 0.5])))
            f = float(rng.uniform(*spec.get("along", [0.2, 0.8])))
            clear = float(rng.uniform(*spec.get("clearance", [0.05, 0.3])))
            side = 1.0 if rng.random() < 0.5 else -1.0
            circles.append((start + f * d + side * (r + clear) * normal, r))
    else:
        # pairs of circles facing each other across the path; consecutive gates are spread evenly
        a0, a1 = spec.get("along", [0.2, 0.8])
        edges = np.linspace(a0, a1, count + 1)
        for g in range(count):
            f = float(rng.uniform(edges[g], edges[g + 1]))
            for side in (1.0, -1.0):
                r = float(rng.uniform(*spec.get("radius", [0.2, 0.5])))
                clear = float(rng.uniform(*spec.get("clearance", [0.05, 0.3])))
                shift = float(rng.uniform(-1, 1)) * spec.get("jitter", 0.0)
                circles.append((start + (f * length + shift) * along_dir + side * (r + clear) * normal, r))
    obstacles = [{"type": "circle", "center": [round(float(c), 6) for c in center], "radius": round(r, 6)}
                 for center, r in circles]
    for wall in template.get("walls", []):
        obstacles.append(dict(wall))
    scen = dict(base)
    scen["obstacles"] = obstacles
    scen["name"] = f"batch-{seed}-{index:04d}"
    return scenario_from_dict(scen, name=scen["name"])


def _evaluate_candidate(template, seed, index, probe: McConfig):
    try:
        sc = _candidate(template, seed, index).validate()
        policy = sc.policy
        design = sc.design
    except ScenarioError as exc:
        return None, "invalid:" + exc.check, None
    cfg = McConfig(num_rollouts=probe.num_rollouts, sim_substeps_per_control_tick=probe.sim_substeps_per_control_tick,
                   rng_seed=(int(probe.rng_seed) + index) % 2 ** 64)
    res = estimate_mc(sc.system, sc.safe_set, policy, design, sc.horizon, sc.partition().times, cfg, threads=1)
    if res.estimate < INTERESTING_RISK:
        return None, "uninteresting", res.estimate
    return sc, "kept", res.estimate


def generate_batch(template: dict, count: int, seed: int, filter: McConfig = McConfig(num_rollouts=PROBE_ROLLOUTS),
                   threads: Optional[int] = None, block: int = 8) -> GeneratedBatch:
    """Sample environments from ``template`` and keep the first ``count`` interesting ones.

    Candidates are examined in index order; the retained set depends only on
    ``seed``.  Raises :class:`TemplateInfeasibleError` when more than 99% of
    at least ``10 * count`` candidates are rejected.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    kept, risks = [], []
    stats = {"candidates": 0, "kept": 0, "uninteresting": 0, "invalid": 0}
    nthreads = thread_count(threads)
    index = 0
    max_candidates = 100 * count
    pool = ThreadPoolExecutor(max_workers=nthreads) if nthreads > 1 else None
    try:
        while len(kept) < count:
            idx = list(range(index, index + block))
            fn = lambda i: _evaluate_candidate(template, seed, i, filter)
            results = list(pool.map(fn, idx)) if pool else [fn(i) for i in idx]
            for i, (sc, why, risk) in zip(idx, results):
                stats["candidates"] += 1
                if sc is not None:
                    kept.append(sc)
                    risks.append(risk)
                    stats["kept"] += 1
                else:
                    stats["invalid" if why.startswith("invalid") else "uninteresting"] += 1
                n = stats["candidates"]
                if len(kept) >= count:
                    break
                if (n >= 10 * count and stats["kept"] / n < 0.01) or n >= max_candidates:
                    raise TemplateInfeasibleError(
                        f"kept {stats['kept']} of {n} candidates; template rarely yields interesting scenarios")
            index += block
    finally:
        if pool:
            pool.shutdown()
    return GeneratedBatch(seed=seed, count=count, scenarios=kept, rejection_stats=stats, probe_risk=risks)


def load_template(path) -> dict:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if "base" not in d or "obstacles" not in d:
        raise ScenarioError("template", "batch template needs 'base' and 'obstacles'")
    return d
