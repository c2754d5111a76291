"""One test per acceptance criterion; a PASS/FAIL line per criterion is printed in the summary."""
import itertools
import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import norm

from conftest import DATA
from exitrisk.belief import apriori_beliefs, truncate_gaussian_1d
from exitrisk.cli import COLUMNS, main, read_csv
from exitrisk.estimators import TimePartition, run_method
from exitrisk.exit_kernel import QuadratureSpec, interval_exit_terms, psi
from exitrisk.monte_carlo import McConfig, estimate_mc
from exitrisk.sde_models import SafeSet, double_integrator_1d, halfplane_constraint
from oracles import first_exit_frequency, truncated_moments_by_sampling

import test_belief

NARROW = str(DATA / "narrow_passage.json")
TEMPLATE = str(DATA / "batch_template.json")


def test_criterion_1_psi_matches_first_exit_mc(record_property):
    start = time.perf_counter()
    worst = 0.0
    failures = []
    grid = list(itertools.product([-2.0, -0.5], [-1.0, 0.0, 1.0], [0.5, 1.0], [0.1, 1.0]))
    for i, (z, h, s, dt) in enumerate(grid):
        p = psi(z, h, s, dt)
        f = first_exit_frequency(z, h, s, dt, n_paths=100_000, n_sub=1000, seed=1000 + i)
        se = math.sqrt(p * (1 - p) / 100_000)
        ratio = abs(p - f) / se if se > 0 else (0.0 if f == 0 else np.inf)
        worst = max(worst, ratio)
        if ratio > 3:
            failures.append((z, h, s, dt, p, f))
    elapsed = time.perf_counter() - start
    record_property("worst_se_ratio", round(worst, 3))
    record_property("seconds", round(elapsed, 1))
    assert not failures, failures
    assert elapsed <= 120


def test_criterion_2_reflection_identity(record_property):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        z, s, dt = -rng.uniform(1e-3, 3), rng.uniform(0.05, 3), rng.uniform(1e-3, 3)
        worst = max(worst, abs(psi(z, 0.0, s, dt) - 2 * norm.cdf(z / (s * math.sqrt(dt)))))
    record_property("max_abs_err", f"{worst:.2e}")
    assert worst <= 1e-12


def test_criterion_3_reduction_equivalence(record_property):
    from exitrisk.belief import GaussianBelief
    rng = np.random.default_rng(3)
    sys_ = double_integrator_1d(noise=0.2)
    safe = SafeSet((halfplane_constraint((1.0,), 0.5, (0,)),))
    start = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        sd = rng.uniform(0.05, 0.3, 2)
        rho = rng.uniform(-0.8, 0.8)
        cov = np.array([[sd[0] ** 2, rho * sd[0] * sd[1]], [rho * sd[0] * sd[1], sd[1] ** 2]])
        b = GaussianBelief.from_state(np.array([rng.uniform(-0.6, 0.2), rng.uniform(-0.5, 1.5)]), cov)
        dt = rng.uniform(0.02, 0.2)
        for mode in ("plain", "safe_weighted"):
            a = interval_exit_terms(sys_, safe, b, 0.0, dt, QuadratureSpec(reduction="position_only"), mode)[0]
            f = interval_exit_terms(sys_, safe, b, 0.0, dt, QuadratureSpec(reduction="full"), mode)[0]
            worst = max(worst, abs(a - f))
    record_property("max_abs_diff", f"{worst:.2e}")
    assert worst <= 1e-3
    assert time.perf_counter() - start <= 60


def test_criterion_4_convergence_study(narrow_passage, record_property):
    sc = narrow_passage
    start = time.perf_counter()
    dts = [0.1, 0.05, 0.025, 0.0125]
    booles, booles_raw, safe = [], [], []
    for dt in dts:
        part = TimePartition.uniform(sc.horizon, dt)
        b = run_method("dt_booles", sc.system, sc.safe_set, sc.design, part)
        booles.append(b.total)
        booles_raw.append(b.raw_total)
        safe.append(run_method("ival_safe", sc.system, sc.safe_set, sc.design, part).total)
    mc = estimate_mc(sc.system, sc.safe_set, sc.policy, sc.design, sc.horizon, sc.partition().times,
                     McConfig(num_rollouts=1000, rng_seed=2024))
    diffs = np.abs(np.diff(safe))
    record_property("dt_booles_raw", [round(v, 3) for v in booles_raw])
    record_property("ival_safe", [round(v, 4) for v in safe])
    record_property("mc", f"{mc.estimate:.4f}+/-{mc.standard_error:.4f}")
    # (a)
    assert all(np.diff(booles) >= 0) and booles[-1] >= 2 * mc.estimate
    # (b)
    assert all(np.diff(diffs) < 0)
    # (c)
    assert abs(safe[-1] - mc.estimate) <= max(0.03, 3 * mc.standard_error)
    assert safe[-1] >= mc.estimate - 0.05 * mc.estimate
    assert time.perf_counter() - start <= 600


def test_criterion_5_batch_ordering(tmp_path, record_property):
    start = time.perf_counter()
    code = main(["batch", "--template", TEMPLATE, "--count", "20", "--rollouts", "500", "--seed", "5",
                 "--out", str(tmp_path)])
    assert code == 0
    stats = {r["method"]: {k: float(r[k]) for k in COLUMNS["stats.csv"][1:]} for r in read_csv(tmp_path / "stats.csv")}
    n = len({r["scenario_id"] for r in read_csv(tmp_path / "batch.csv")})
    for m, s in stats.items():
        record_property(m, f"bias={s['bias']:+.4f} rmse={s['rmse']:.4f} cons={s['conservative_rate']:.2f}")
    record_property("scenarios", n)
    assert n == 20
    assert abs(stats["ival_safe"]["bias"]) < stats["dt_booles"]["bias"]
    assert stats["ival_safe"]["rmse"] <= stats["dt_gauss"]["rmse"]
    assert stats["dt_booles"]["conservative_rate"] == 1.0
    assert stats["ival_safe"]["conservative_rate"] >= 0.70
    assert time.perf_counter() - start <= 1800


def test_criterion_6_linear_gaussian_propagation(record_property):
    sys_, pol, design, C0 = test_belief.linear_setup(2.5)
    steps = 150
    ref, _, _ = test_belief.oracle_covariances(sys_, design, C0, steps)
    beliefs = apriori_beliefs(sys_, design, design.initial_belief(), np.arange(steps + 1) * sys_.control_dt)
    worst = max(np.linalg.norm(b.cov - C) / np.linalg.norm(C) for b, C in zip(beliefs, ref))
    record_property("max_rel_err", f"{worst:.2e}")
    assert worst <= 1e-8


def test_criterion_7_truncation_oracle(record_property):
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(20):
        mean, var = rng.uniform(-2, 2), rng.uniform(0.1, 4)
        upper = mean + math.sqrt(var) * rng.uniform(-1.5, 2.5)
        got = truncate_gaussian_1d(mean, var, upper)
        est, se = truncated_moments_by_sampling(mean, var, upper, n=1_000_000, seed=i)
        for g, e, s in zip(got, est, se):
            worst = max(worst, abs(g - e) / s)
    record_property("worst_se_ratio", round(worst, 3))
    assert worst <= 3


COMMANDS = [
    ["estimate", "--scenario", NARROW, "--rollouts", "200"],
    ["mc", "--scenario", NARROW, "--rollouts", "300"],
    ["converge", "--scenario", NARROW, "--methods", "dt_booles,ival_safe,mc", "--dt", "0.1,0.05,0.025",
     "--rollouts", "200"],
    ["batch", "--template", TEMPLATE, "--count", "2", "--rollouts", "100"],
]


def _run_cli(args, out, threads):
    env = {"EXITRISK_THREADS": str(threads), "PATH": "/usr/bin:/bin"}
    import os
    env = {**os.environ, **env}
    subprocess.run([sys.executable, "-m", "exitrisk", *args, "--seed", "31", "--out", str(out)], env=env,
                   check=True, capture_output=True)
    return {p.name: p.read_bytes() for p in sorted(Path(out).glob("*.csv"))}


def test_criterion_8_cli_determinism(tmp_path, record_property):
    start = time.perf_counter()
    for i, args in enumerate(COMMANDS):
        a = _run_cli(args, tmp_path / f"{i}a", 1)
        b = _run_cli(args, tmp_path / f"{i}b", 1)
        c = _run_cli(args, tmp_path / f"{i}c", 4)
        assert a and a == b == c, args[0]
    record_property("commands", ",".join(c[0] for c in COMMANDS))
    record_property("seconds", round(time.perf_counter() - start, 1))
    assert time.perf_counter() - start <= 300


INVARIANT_TESTS = [
    "test_sde_models.py::test_gradients_and_hessians_match_finite_differences",
    "test_sde_models.py::test_dubins_thrust_norm_preserved",
    "test_sde_models.py::test_safe_set_order_independent",
    "test_belief.py::test_covariance_stays_psd_over_long_horizon",
    "test_belief.py::test_truncation_monotone_and_shrinking",
    "test_belief.py::test_conditioning_never_raises_constraint_value",
    "test_belief.py::test_linear_propagation_matches_brute_force_recursion",
    "test_exit_kernel.py::test_psi_in_unit_interval",
    "test_exit_kernel.py::test_psi_nonincreasing_in_distance",
    "test_exit_kernel.py::test_psi_nondecreasing_in_drift",
    "test_exit_kernel.py::test_psi_nondecreasing_in_dt",
    "test_exit_kernel.py::test_psi_nondecreasing_in_sigma_for_nonpositive_drift",
    "test_exit_kernel.py::test_psi_small_sigma_limit",
    "test_exit_kernel.py::test_reductions_agree_on_double_integrator",
    "test_estimators.py::test_totals_bounded_deterministic_and_clamped_only_at_total",
    "test_estimators.py::test_quiet_system_inside_safe_set",
    "test_estimators.py::test_ival_safe_bounded_by_plain_intervals",
    "test_monte_carlo.py::test_bit_reproducible_and_thread_independent",
    "test_monte_carlo.py::test_cumulative_curve_and_histogram",
    "test_monte_carlo.py::test_first_exit_is_recorded_once",
    "test_monte_carlo.py::test_disjoint_seeds_are_statistically_consistent",
    "test_scenarios.py::test_round_trip_identity",
    "test_scenarios.py::test_batch_deterministic_and_thread_independent",
    "test_scenarios.py::test_retained_scenarios_are_interesting_and_safe",
    "test_cli.py::test_estimate_curves_nondecreasing_and_deterministic",
]


def test_criterion_9_invariant_suites(record_property):
    here = Path(__file__).parent
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           *[str(here / t) for t in INVARIANT_TESTS]], capture_output=True, text=True, cwd=here)
    last = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    record_property("result", last)
    assert proc.returncode == 0, proc.stdout[-3000:]
