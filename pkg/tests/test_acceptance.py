"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""
import collections
import itertools
import math
import time
from fractions import Fraction

import numpy as np
import pytest
from scipy.stats import spearmanr

from metabenign.adaptation import MetaMethod, eig_map, meta_objective
from metabenign.experiments import EnvTemplate, PanelSpec, SweepConfig, aggregate, preset, run_sweep
from metabenign.meta_solver import MonteCarlo, min_norm_solve, population_solution
from metabenign.risk import excess_risk
from metabenign.spectrum import effective_dimension, effective_ranks, order_preserved
from metabenign.task_model import (
    CovarianceSpec,
    ExplicitSpectrum,
    Rotated,
    ScaledSpiked,
    SpikedIdentity,
    TaskEnvironment,
    sample_meta_dataset,
)

# suite-level constant for the bound-dominance check (criterion 10)
BOUND_C = 2.0


def _report(capsys, k, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {k}: {detail}")
    assert ok, detail


def _curves(records, metric):
    """``{(panel, series): [(x, Stats), ...]}`` sorted by x."""
    out = collections.defaultdict(list)
    for (_, panel, series, x), stats in aggregate(records).items():
        out[(panel, series)].append((x, stats[metric]))
    return {k: sorted(v, key=lambda t: t[0]) for k, v in out.items()}


def test_criterion_1_erm_reduction(capsys):
    start = time.perf_counter()
    worst_maml = worst_imaml = 0.0
    for s in range(50):
        rng = np.random.default_rng(s)
        d = int(rng.integers(5, 101))
        M = int(rng.integers(1, 7))
        N = int(rng.integers(2, 60 // M + 1))
        env = TaskEnvironment(CovarianceSpec(d, SpikedIdentity(int(rng.integers(0, d)), float(rng.uniform(0.1, 1)))),
                              theta_mean=rng.standard_normal(d) / math.sqrt(d))
        ds = sample_meta_dataset(env, M, N, seed=s)
        erm = min_norm_solve(MetaMethod.erm(), ds).theta0_hat
        scale = np.linalg.norm(erm)
        worst_maml = max(worst_maml, np.linalg.norm(min_norm_solve(MetaMethod.maml(0.0), ds).theta0_hat - erm) / scale)
        worst_imaml = max(worst_imaml, np.linalg.norm(min_norm_solve(MetaMethod.imaml(1e12), ds).theta0_hat - erm) / scale)
    elapsed = time.perf_counter() - start
    ok = worst_maml <= 1e-10 and worst_imaml <= 1e-6 and elapsed < 30
    _report(capsys, 1, ok, f"max rel diff maml(0)={worst_maml:.2e} (<=1e-10), imaml(1e12)={worst_imaml:.2e} (<=1e-6), {elapsed:.1f}s")


def _probe_quadratic(f, d):
    """``A, c`` with ``f(x) = x^T A x - 2 c^T x + const``, recovered from function values only."""
    eye = np.eye(d)
    k = f(np.zeros(d))
    plus = np.array([f(e) for e in eye])
    minus = np.array([f(-e) for e in eye])
    a = np.diag((plus + minus) / 2 - k)
    for i, j in itertools.combinations(range(d), 2):
        a[i, j] = a[j, i] = (f(eye[i] + eye[j]) - plus[i] - plus[j] + k) / 2
    return a, (minus - plus) / 4


def test_criterion_2_min_norm_vs_gradient_descent(capsys):
    start = time.perf_counter()
    methods = [MetaMethod.erm(), MetaMethod.maml(0.1), MetaMethod.maml(0.3), MetaMethod.imaml(1.0)]
    worst_gap, worst_loss, iters = 0.0, 0.0, 0
    for s in range(20):
        method = methods[s % len(methods)]
        env = TaskEnvironment(CovarianceSpec(30, SpikedIdentity(5, 0.4)), theta_mean=np.full(30, 0.2))
        ds = sample_meta_dataset(env, 3, 4, seed=s)
        a, c = _probe_quadratic(lambda t: meta_objective(method, t, ds), 30)
        theta = np.zeros(30)
        step = 1.0 / np.linalg.eigvalsh(a).max()
        for it in range(200_000):
            grad = 2 * (a @ theta - c)
            if np.linalg.norm(grad) <= 1e-10:
                break
            theta -= 0.5 * step * grad
        iters = max(iters, it)
        sol = min_norm_solve(method, ds)
        worst_gap = max(worst_gap, float(np.linalg.norm(theta - sol.theta0_hat)))
        b = sol.design.b
        if sol.rank == sol.design.rows:
            worst_loss = max(worst_loss, sol.residual_norm**2 / float(b @ b))
    elapsed = time.perf_counter() - start
    ok = worst_gap <= 1e-6 and worst_loss <= 1e-16 and elapsed < 60
    _report(capsys, 2, ok, f"max ||theta_gd - theta_svd||={worst_gap:.2e} (<=1e-6), max loss/||b||^2={worst_loss:.2e} (<=1e-16), "
                           f"{iters} GD steps max, {elapsed:.1f}s")


CORPUS_ENVS = {
    "spiked": lambda: TaskEnvironment(CovarianceSpec(40, SpikedIdentity(8, 0.3)), theta_mean=np.full(40, 0.15)),
    "scaled": lambda: TaskEnvironment(CovarianceSpec(40, ScaledSpiked(8, 0.3, 0.5)), theta_mean=np.full(40, 0.15)),
    "rotated": lambda: TaskEnvironment(
        CovarianceSpec(40, Rotated(ExplicitSpectrum(tuple(np.geomspace(2, 0.05, 40))), rotation_seed=3)),
        theta_mean=np.full(40, 0.15)),
}
CORPUS_METHODS = [MetaMethod.erm(), MetaMethod.maml(0.1), MetaMethod.imaml(0.1), MetaMethod.imaml(1e3)]


def test_criterion_3_excess_risk_identity(capsys):
    worst, count = 0.0, 0
    for (name, make), method, N in itertools.product(CORPUS_ENVS.items(), CORPUS_METHODS, (4, 20)):
        env = make()
        ds = sample_meta_dataset(env, 5, N, seed=count)
        pop = population_solution(method, env)
        rep = excess_risk(min_norm_solve(method, ds), pop, MonteCarlo(20_000, 100 + count))
        worst = max(worst, abs(rep.mc_z))
        count += 1
    ok = worst <= 3.0
    _report(capsys, 3, ok, f"max |MC diff - quadratic| / stderr = {worst:.2f} over {count} corpus instances (<=3)")


def _exact_tail(mu, k):
    tail = [Fraction(x) for x in mu[k:]]
    s, sq = sum(tail), sum(x * x for x in tail)
    return (s / tail[0] if tail[0] else None), (s * s / sq if sq else None)


def test_criterion_4_effective_rank_oracle(capsys):
    start = time.perf_counter()
    mismatches = violations = flat_fail = 0
    for s in range(100):
        rng = np.random.default_rng(s)
        d = int(rng.integers(2, 60))
        mu = np.sort(rng.exponential(size=d) ** rng.uniform(0.5, 3))[::-1]
        if s % 3 == 0:
            # flat tail from a random index on
            j = int(rng.integers(0, d))
            mu[j:] = mu[j]
        else:
            j = None
        for k in range(d):
            r_ex, big_ex = _exact_tail(mu, k)
            r, big_r = effective_ranks(mu, k)
            mismatches += (r != float(r_ex)) + (big_r != float(big_ex))
            violations += not (r <= big_r <= d - k)
            if j is not None and k >= j:
                flat_fail += not (r == big_r == d - k)
        for nm in (1, 3, 10, 25):
            brute = next((k for k in range(d) if _exact_tail(mu, k)[0] >= nm), None)
            mismatches += effective_dimension(mu, nm) != brute
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and violations == 0 and flat_fail == 0 and elapsed < 5
    _report(capsys, 4, ok, f"{mismatches} mismatches vs exact scan, {violations} ordering violations, "
                           f"{flat_fail} flat-tail failures on 100 spectra, {elapsed:.1f}s")


def _monotone_violations(points, tol_sigma=1.0):
    """Adjacent decreases and whether each stays within ``tol_sigma`` combined stderr."""
    bad, within = 0, True
    for (_, a), (_, b) in zip(points, points[1:]):
        if b.mean < a.mean:
            bad += 1
            within &= a.mean - b.mean <= tol_sigma * math.hypot(a.stderr, b.stderr)
    return bad, within


def _by_series_value(records, metric, panel):
    """``{x: [(series value, Stats), ...]}`` for one panel, series ordered by value."""
    table = collections.defaultdict(list)
    for (_, p, series, x), stats in aggregate(records).items():
        if p == panel:
            table[x].append((float(series.split("=")[-1]), stats[metric]))
    return {x: sorted(v, key=lambda t: t[0]) for x, v in table.items()}


def test_criterion_5_example1_beta_trend(capsys):
    start = time.perf_counter()
    cfg = preset("fig4_example1")
    records = run_sweep(cfg)
    elapsed = time.perf_counter() - start
    failures, total_viol = [], 0
    for panel in ("maml", "imaml"):
        for x, points in _by_series_value(records, "excess_risk", panel).items():
            bad, within = _monotone_violations(points)
            total_viol += bad
            if bad > 1 or not within:
                failures.append(f"{panel} N={x}")
    errors = sum(r.status != "ok" for r in records)
    ok = not failures and errors == 0 and elapsed < 300
    _report(capsys, 5, ok, f"beta monotone at every N for maml/imaml ({total_viol} adjacent violations within 1 stderr, "
                           f"failing: {failures or 'none'}), {errors} failed records, {elapsed:.0f}s")


def test_criterion_6_example2_sigma_trend(capsys):
    start = time.perf_counter()
    cfg = preset("fig5_example2")
    records = run_sweep(cfg)
    elapsed = time.perf_counter() - start
    failures = []
    for panel in ("maml", "imaml"):
        for x, points in _by_series_value(records, "excess_risk", panel).items():
            if any(b.mean < a.mean for (_, a), (_, b) in zip(points, points[1:])):
                failures.append(f"{panel} N={x}")
    v_by_sigma = collections.defaultdict(list)
    for r in records:
        v_by_sigma[float(r.series.split("=")[-1])].append(r.V)
    v_means = [float(np.mean(v_by_sigma[k])) for k in sorted(v_by_sigma)]
    v_ok = all(b >= a for a, b in zip(v_means, v_means[1:]))
    ok = not failures and v_ok and elapsed < 300
    _report(capsys, 6, ok, f"risk nondecreasing in sigma_omega (failing: {failures or 'none'}); "
                           f"mean V = {', '.join(f'{v:.3f}' for v in v_means)}; {elapsed:.0f}s")


def test_criterion_7_double_descent(capsys):
    start = time.perf_counter()
    cfg = preset("fig3_double_descent")
    records = run_sweep(cfg)
    elapsed = time.perf_counter() - start
    d, M = cfg.env.d, cfg.M
    split = cfg.env.build().split_sizes
    summary, failures = [], []
    for key, points in _curves(records, "excess_risk").items():
        i = max(range(len(points)), key=lambda j: points[j][1].mean)
        x, peak = points[i]
        rows = M * split(x)[1]
        interior = 0 < i < len(points) - 1
        margin = min((peak.mean - e.mean) / math.hypot(peak.stderr, e.stderr) for e in (points[0][1], points[-1][1]))
        near = d / 2 <= rows <= 2 * d
        summary.append(f"{key[1]} N={x} ({margin:.1f} se)")
        if not (interior and near and margin > 2):
            failures.append(key[1])
    ok = not failures and elapsed < 600
    _report(capsys, 7, ok, f"interior peaks near M*N_val ~ d: {'; '.join(summary)}; failing: {failures or 'none'}; {elapsed:.0f}s")


def test_criterion_8_variance_ratio_and_bias_trends(capsys):
    start = time.perf_counter()
    cfg = preset("fig6_lemmas")
    records = run_sweep(cfg)
    elapsed = time.perf_counter() - start
    ratio = _curves([r for r in records if r.panel == "cross_ratio_vs_d"], "cross_ratio")
    (medians,) = [[s.median for _, s in pts] for pts in ratio.values()]
    ratio_ok = all(b < a for a, b in zip(medians, medians[1:]))
    bias_recs = [r for r in records if r.panel == "bias_vs_M"]
    (bias,) = [[(x, s.mean) for x, s in pts] for pts in _curves(bias_recs, "bias").values()]
    full = [r for r in bias_recs if r.rank == r.d]
    tiny = all(r.bias <= 1e-10 for r in full)
    decreasing = all(b <= a or b <= 1e-10 for (_, a), (_, b) in zip(bias, bias[1:]))
    ok = ratio_ok and tiny and decreasing and bool(full) and elapsed < 300
    _report(capsys, 8, ok, f"median ratio over d: {', '.join(f'{m:.4f}' for m in medians)}; "
                           f"mean bias over M: {', '.join(f'{b:.2g}' for _, b in bias)}; "
                           f"max bias at full rank {max((r.bias for r in full), default=math.nan):.1e}; {elapsed:.0f}s")


def test_criterion_9_order_boundary(capsys):
    start = time.perf_counter()
    lam = np.array([1.0, 0.6])
    safe = order_preserved(MetaMethod.maml(1 / 3 - 1e-6), lam)
    unsafe = order_preserved(MetaMethod.maml(0.4), lam)
    grid = np.linspace(0.0, 1.0, 4001)
    mapped = eig_map(MetaMethod.maml(0.4), grid)
    inversion = bool(np.any(np.diff(mapped) < 0))
    no_inversion_safe = bool(np.all(np.diff(eig_map(MetaMethod.maml(1 / 3 - 1e-6), grid)) >= 0))
    bracket_ok = True
    for alpha in np.linspace(1e-4, 1 / 3, 200):
        q = eig_map(MetaMethod.maml(alpha), lam) / lam
        bracket_ok &= bool(np.all((q >= (1 - alpha) ** 2 * (1 - 1e-12)) & (q <= 1)))
    for gamma in np.geomspace(1.0, 1e6, 200):
        q = eig_map(MetaMethod.imaml(gamma), lam) / lam
        bracket_ok &= bool(np.all((q >= (1 + 1 / gamma) ** -2 * (1 - 1e-12)) & (q <= 1)))
    elapsed = time.perf_counter() - start
    ok = safe and not unsafe and inversion and no_inversion_safe and bracket_ok and elapsed < 1
    _report(capsys, 9, ok, f"order_preserved(alpha=1/3-1e-6)={safe}, (alpha=0.4)={unsafe}, grid inversion at 0.4={inversion}, "
                           f"bracketing={bracket_ok}, {elapsed:.2f}s")


def test_criterion_10_bound_dominance(capsys):
    start = time.perf_counter()
    cfg = SweepConfig(
        "bound",
        EnvTemplate(d=200, pattern="spiked", d1=20),
        tuple(
            PanelSpec(label, (m,), "N", (2, 4, 6, 8, 10, 12, 14, 16, 18), series_param="beta", series_values=(0.1, 0.3, 0.6, 1.0))
            for label, m in (("maml", MetaMethod.maml(0.1)), ("imaml", MetaMethod.imaml(1e3)))
        ),
        M=10,
        mc_draws=2,
    )
    records = run_sweep(cfg)
    elapsed = time.perf_counter() - start
    risk, bound = _curves(records, "excess_risk"), _curves(records, "bound_total")
    worst_ratio, worst_rho = 0.0, 1.0
    for key in risk:
        m = [s.mean for _, s in risk[key]]
        b = [s.mean for _, s in bound[key]]
        worst_ratio = max(worst_ratio, max(x / y for x, y in zip(m, b)))
        worst_rho = min(worst_rho, float(spearmanr(m, b).statistic))
    ok = worst_ratio <= BOUND_C and worst_rho >= 0.8 and elapsed < 300
    _report(capsys, 10, ok, f"max measured/bound = {worst_ratio:.2f} (C={BOUND_C:g}), min Spearman rho = {worst_rho:.2f} "
                            f"over {len(risk)} curves, {elapsed:.0f}s")
