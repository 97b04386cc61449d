"""Acceptance criteria 1-10, each at its stated tolerance and runtime budget.

Every criterion prints one ``PASS``/``FAIL`` line; the lines are repeated in
the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from proxlearn.admm import AdmmConfig, admm_run
from proxlearn.baselines import GridSpec, IncrementDensity, default_grid, lmmse_denoise, mmse_smoother
from proxlearn.experiments import SweepConfig, run_ktest_stability, run_noise_sweep, run_scale_once
from proxlearn.learning import ConstraintSet, backprop_gradient, knot_range_from_data, project_to_S, unrolled_loss
from proxlearn.signals import LevyModel, make_batch
from proxlearn.splines import (
    ANTISYMMETRIC,
    GENERAL,
    ScaledShrinkage,
    ShrinkageSpline,
    SoftThreshold,
    check_firmly_nonexpansive,
    recover_penalty,
)

from conftest import ACCEPTANCE_LINES, tv_reference_certified

CP = LevyModel.compound_poisson(0.6)
BM = LevyModel.brownian()


def record(capsys, number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


@pytest.fixture(scope="module")
def cp_sweep():
    t0 = time.perf_counter()
    cfg = SweepConfig((1.0,), 100, 100, CP, estimators=("CADMM", "MMSE", "LMMSE", "TV"), seed=0)
    return run_noise_sweep(cfg), time.perf_counter() - t0


def test_criterion_1_gradient(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    h = 1e-5
    for i in range(20):
        rng = np.random.default_rng(1000 + i)
        b = make_batch(CP, 20, 1, 1.0, 1000 + i)
        admm = AdmmConfig(2.0, 3)
        for mode in (GENERAL, ANTISYMMETRIC):
            M = knot_range_from_data(b, 0.5)
            s = ShrinkageSpline.identity(0.5, M, mode)
            s = s.with_coeffs(s.coeffs + 0.15 * rng.standard_normal(s.n_coeffs))
            g = backprop_gradient(s, b.clean[:, 0], b.noisy[:, 0], admm).grad
            fd = np.empty_like(g)
            for m in range(g.size):
                e = np.zeros_like(g)
                e[m] = h
                fd[m] = (unrolled_loss(s.with_coeffs(s.coeffs + e), b.clean, b.noisy, admm)
                         - unrolled_loss(s.with_coeffs(s.coeffs - e), b.clean, b.noisy, admm)) / (2 * h)
            worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    dt = time.perf_counter() - t0
    record(capsys, 1, worst < 1e-5 and dt < 30,
           f"worst relative gradient error {worst:.2e} (< 1e-5), {dt:.1f}s (< 30s)")


def test_criterion_2_firm_nonexpansiveness(capsys, cp_sweep):
    report, _ = cp_sweep
    s = report.splines["CADMM@1"]
    S = ConstraintSet.for_spline(s)
    inc = S.increments(s.coeffs)
    rep = check_firmly_nonexpansive(s, grid_points=10_000)
    ok = (inc.min() >= -1e-10 and inc.max() <= s.delta + 1e-10
          and rep.min_slope >= -1e-9 and rep.max_slope <= 1 + 1e-9)
    record(capsys, 2, ok, f"increments in [{inc.min():.3g}, {inc.max():.6g}] (delta {s.delta}), "
                          f"slopes in [{rep.min_slope:.3g}, {rep.max_slope:.10g}]")


def test_criterion_3_admm_tv_oracle(capsys):
    b = make_batch(CP, 100, 10, 1.0, 3)
    lam, mu = 1.0, 2.0
    t0 = time.perf_counter()
    X = admm_run(b.noisy, SoftThreshold(lam / mu), AdmmConfig(mu, 2000)).x_final
    ref, kkt = tv_reference_certified(b.noisy, lam)
    dt = time.perf_counter() - t0
    err = float(np.max(np.linalg.norm(X - ref, axis=0) / np.linalg.norm(ref, axis=0)))
    record(capsys, 3, err < 1e-6 and kkt < 1e-9 and dt < 60,
           f"max relative error {err:.2e} (< 1e-6) vs KKT-certified reference "
           f"(violation {kkt:.1e}), {dt:.1f}s (< 60s)")


def test_criterion_4_mmse_oracle(capsys):
    t0 = time.perf_counter()
    b = make_batch(BM, 100, 20, 1.0, 4)
    dens = IncrementDensity(BM)
    g = default_grid(b.noisy, 1.0, 2048)
    xm = mmse_smoother(b.noisy, 1.0, dens, g)
    err = float(np.max(np.abs(xm - lmmse_denoise(b.noisy, 1.0))))
    x2 = mmse_smoother(b.noisy, 1.0, dens, GridSpec(g.lo, g.hi, 4096))
    dbl = float(np.max(np.abs(x2 - xm)))
    dt = time.perf_counter() - t0
    record(capsys, 4, err < 1e-3 and dbl < 1e-6 and dt < 120,
           f"max |MMSE - LMMSE| {err:.2e} (< 1e-3), grid doubling {dbl:.2e} (< 1e-6), {dt:.1f}s (< 120s)")


def test_criterion_5_compound_poisson(capsys, cp_sweep):
    report, dt = cp_sweep
    cadmm, mmse, tv = (report.mean(1.0, e) for e in ("CADMM", "MMSE", "TV"))
    ok = abs(mmse - cadmm) <= 0.5 and cadmm > tv and dt < 15 * 60
    record(capsys, 5, ok, f"CADMM {cadmm:.3f} dB, MMSE {mmse:.3f} dB (gap {mmse - cadmm:.3f}, <= 0.5), "
                          f"TV {tv:.3f} dB (< CADMM), LMMSE {report.mean(1.0, 'LMMSE'):.3f} dB, "
                          f"{dt:.0f}s (< 900s)")


def test_criterion_6_brownian(capsys):
    t0 = time.perf_counter()
    cfg = SweepConfig((1.0,), 100, 100, BM, estimators=("CADMM", "LMMSE"), seed=0)
    r = run_noise_sweep(cfg)
    dt = time.perf_counter() - t0
    cadmm, lmmse = r.mean(1.0, "CADMM"), r.mean(1.0, "LMMSE")
    record(capsys, 6, abs(cadmm - lmmse) <= 0.3 and dt < 15 * 60,
           f"CADMM {cadmm:.3f} dB vs LMMSE {lmmse:.3f} dB (gap {lmmse - cadmm:.3f}, <= 0.3), {dt:.0f}s (< 900s)")


def test_criterion_7_scale_once(capsys):
    t0 = time.perf_counter()
    levels = (10**-0.5, 1.0, 10**0.5)
    cfg = SweepConfig(levels, 100, 100, CP, estimators=("CADMM",), seed=0)
    r = run_scale_once(cfg)
    dt = time.perf_counter() - t0
    gaps = {s2: r.mean(s2, "CADMM-direct") - r.mean(s2, "CADMM-scaled") for s2 in (levels[0], levels[2])}
    ok = all(abs(g) <= 0.3 for g in gaps.values()) and dt < 20 * 60
    detail = ", ".join(f"sigma2={s2:.4g}: scaled {r.mean(s2, 'CADMM-scaled'):.3f} vs direct "
                       f"{r.mean(s2, 'CADMM-direct'):.3f} dB (gap {g:.3f})" for s2, g in gaps.items())
    record(capsys, 7, ok, f"{detail}; <= 0.3 dB, {dt:.0f}s (< 1200s)")


def test_criterion_8_scaled_soft_threshold(capsys):
    t0 = time.perf_counter()
    tau = 0.5
    s = ShrinkageSpline.from_function(SoftThreshold(tau), 0.05, 120, ANTISYMMETRIC)
    y = np.array([-5 * tau, -3 * tau, 0.0, 0.5 * tau, 3 * tau, 5 * tau])
    err = float(np.max(np.abs(ScaledShrinkage(s, 2.0)(y) - SoftThreshold(2 * tau)(y))))
    dt = time.perf_counter() - t0
    record(capsys, 8, err < 1e-6 and dt < 1, f"max error {err:.2e} (< 1e-6), {dt:.3f}s (< 1s)")


def test_criterion_9_penalty(capsys, cp_sweep):
    report, _ = cp_sweep
    splines = [report.splines["CADMM@1"]]
    rng = np.random.default_rng(9)
    for _ in range(5):
        M, d = int(rng.integers(6, 30)), float(rng.uniform(0.1, 1.0))
        c = project_to_S(rng.normal(0.4 * d, d, M).cumsum(), ConstraintSet(d, M, ANTISYMMETRIC))
        splines.append(ShrinkageSpline(d, M, c, ANTISYMMETRIC))
    sym, curv = 0.0, math.inf
    for s in splines:
        p = recover_penalty(s, np.linspace(-s.x_max, s.x_max, 20001))
        sym = max(sym, p.symmetry_error())
        sl = p.slopes()
        curv = min(curv, float(np.min(np.diff(sl)) / max(1.0, np.max(np.abs(sl)))))
    v = np.arange(-4000, 4001) * 1e-3
    ps = recover_penalty(SoftThreshold(1.0), v)
    abs_err = float(np.max(np.abs(ps.phi_values - np.abs(ps.u_grid))))
    ok = sym < 1e-6 and curv >= -1e-9 and abs_err < 1e-3
    record(capsys, 9, ok, f"symmetry error {sym:.2e} (< 1e-6), min normalized second difference "
                          f"{curv:.2e} (>= -1e-9), soft-threshold |Phi - |u|| {abs_err:.2e} (< 1e-3)")


def test_criterion_10_ktest_stability(capsys):
    t0 = time.perf_counter()
    r = run_ktest_stability(k_train=2, sigma2=10.0, k_test_values=range(2, 51), model=CP, seed=0)
    dt = time.perf_counter() - t0
    var_c = r.variation("CADMM", 20, 50)
    var_u = r.variation("ADMM", 20, 50)
    record(capsys, 10, var_c < 0.2 and dt < 600,
           f"CADMM SNR variation over K_test 20..50: {var_c:.3f} dB (< 0.2); "
           f"unconstrained (report only): {var_u:.3f} dB; {dt:.0f}s (< 600s)")
