"""Fast built-in consistency checks, run by ``proxlearn selftest``.

Each check compares a component against an independent computation and
returns ``(name, ok, detail)``.
"""

from __future__ import annotations

import time

import numpy as np

from .admm import AdmmConfig, admm_run
from .baselines import IncrementDensity, lmmse_denoise, mmse_smoother, tv_denoise
from .learning import ConstraintSet, backprop_gradient, project_to_S, unrolled_loss
from .signals import LevyModel, make_batch
from .splines import (
    ANTISYMMETRIC,
    GENERAL,
    ScaledShrinkage,
    ShrinkageSpline,
    SoftThreshold,
    check_firmly_nonexpansive,
)


def check_gradient(seed: int = 0, h: float = 1e-5) -> tuple[str, bool, str]:
    rng = np.random.default_rng(seed)
    batch = make_batch(LevyModel.compound_poisson(), 20, 1, 1.0, seed)
    admm = AdmmConfig(2.0, 3)
    worst = 0.0
    for mode in (GENERAL, ANTISYMMETRIC):
        s = ShrinkageSpline.identity(0.5, 16, mode)
        s = s.with_coeffs(s.coeffs + 0.1 * rng.standard_normal(s.n_coeffs))
        g = backprop_gradient(s, batch.clean[:, 0], batch.noisy[:, 0], admm).grad
        fd = np.empty_like(g)
        for m in range(g.size):
            e = np.zeros_like(g)
            e[m] = h
            fd[m] = (unrolled_loss(s.with_coeffs(s.coeffs + e), batch.clean, batch.noisy, admm)
                     - unrolled_loss(s.with_coeffs(s.coeffs - e), batch.clean, batch.noisy, admm)) / (2 * h)
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-300))
    return "backprop gradient vs finite differences", worst < 1e-5, f"rel err {worst:.2e}"


def _lasso_reference(y, lam, iters=200_000, tol=1e-13):
    """FISTA on ``min_u 1/2 ||y - S u||^2 + lam ||u||_1`` with ``S`` the running sum."""
    n = y.size
    # 1 / ||S||^2: the smallest eigenvalue of L^T L
    step = 2.0 - 2.0 * np.cos(np.pi / (2 * n + 1))
    u = np.zeros(n)
    z = u.copy()
    t = 1.0
    for _ in range(iters):
        r = np.cumsum(z) - y
        grad = np.cumsum(r[::-1])[::-1]
        u_new = z - step * grad
        u_new = np.sign(u_new) * np.maximum(np.abs(u_new) - step * lam, 0.0)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        z = u_new + (t - 1) / t_new * (u_new - u)
        if np.linalg.norm(u_new - u) <= tol * max(np.linalg.norm(u_new), 1.0):
            u = u_new
            break
        u, t = u_new, t_new
    return np.cumsum(u)


def check_tv(seed: int = 1) -> tuple[str, bool, str]:
    b = make_batch(LevyModel.compound_poisson(), 30, 1, 1.0, seed)
    y = b.noisy[:, 0]
    ref = _lasso_reference(y, 1.0)
    xh = tv_denoise(y, 1.0)
    err = np.linalg.norm(xh - ref) / np.linalg.norm(ref)
    return "ADMM soft-threshold vs TV reference", err < 1e-6, f"rel err {err:.2e}"


def check_mmse(seed: int = 2) -> tuple[str, bool, str]:
    b = make_batch(LevyModel.brownian(), 50, 3, 1.0, seed)
    xm = mmse_smoother(b.noisy, 1.0, IncrementDensity(LevyModel.brownian()))
    err = float(np.max(np.abs(xm - lmmse_denoise(b.noisy, 1.0))))
    return "grid MMSE vs closed-form LMMSE (Brownian)", err < 1e-3, f"max err {err:.2e}"


def check_scaling() -> tuple[str, bool, str]:
    tau = 0.5
    s = ShrinkageSpline.from_function(SoftThreshold(tau), 0.05, 120, ANTISYMMETRIC)
    t = np.linspace(-4, 4, 81)
    t = t[np.abs(np.abs(t) - 2 * tau) > 0.1]
    err = float(np.max(np.abs(ScaledShrinkage(s, 2.0)(t) - SoftThreshold(2 * tau)(t))))
    return "scaled soft-threshold closed form", err < 1e-6, f"max err {err:.2e}"


def check_projection(seed: int = 3) -> tuple[str, bool, str]:
    rng = np.random.default_rng(seed)
    S = ConstraintSet(0.25, 20)
    z = np.cumsum(rng.normal(0.1, 0.4, 20))
    c = project_to_S(z, S)
    s = ShrinkageSpline(0.25, 20, c, ANTISYMMETRIC)
    ok = S.contains(c) and check_firmly_nonexpansive(s).ok
    return "projection lands in the firmly nonexpansive set", ok, f"violation {S.violation(c):.1e}"


def check_identity(seed: int = 4) -> tuple[str, bool, str]:
    b = make_batch(LevyModel.brownian(), 40, 2, 1.0, seed)
    s = ShrinkageSpline.identity(0.5, 60, GENERAL)
    x = admm_run(b.noisy, s, AdmmConfig(2.0, 500)).x_final
    err = float(np.max(np.abs(x - b.noisy)))
    return "identity shrinkage leaves the signal unchanged", err < 1e-8, f"max err {err:.2e}"


CHECKS = (check_gradient, check_tv, check_mmse, check_scaling, check_projection, check_identity)


def run_all(stream=None) -> bool:
    ok_all = True
    for check in CHECKS:
        t0 = time.perf_counter()
        name, ok, detail = check()
        ok_all &= ok
        if stream is not None:
            print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail} ({time.perf_counter() - t0:.1f}s)",
                  file=stream)
    return ok_all
