"""Evaluation protocol: noise sweeps, learn-once scaling, K_test stability
and convergence traces.

Reports hold per-signal SNR improvements so that any aggregate can be
recomputed; ``to_csv`` writes them in tidy (one row per signal) form.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .admm import AdmmConfig, admm_run, factorize
from .baselines import (
    TV_ITERATIONS,
    IncrementDensity,
    lmmse_denoise,
    mmse_smoother,
    tv_oracle_lambda,
)
from .learning import CONSTRAINED, UNCONSTRAINED, TrainConfig, train
from .signals import LevyModel, SignalBatch, make_batch
from .splines import ScaledShrinkage, ShrinkageSpline, check_firmly_nonexpansive, recover_penalty

__all__ = [
    "snr_improvement",
    "snr_db",
    "TrainTemplate",
    "SweepConfig",
    "CellResult",
    "ExperimentReport",
    "run_noise_sweep",
    "run_scale_once",
    "run_ktest_stability",
    "KTestResult",
    "convergence_trace",
    "default_v_grid",
    "preset",
    "ESTIMATORS",
]

log = logging.getLogger(__name__)

ESTIMATORS = ("CADMM", "ADMM", "MMSE", "LMMSE", "TV")


def snr_improvement(x_clean, x_hat, y):
    """``10 log10(||y - x||^2 / ||x_hat - x||^2)`` in dB, per column.

    Positive when ``x_hat`` is closer to ``x_clean`` than ``y`` is; ``inf``
    for a perfect estimate.
    """
    x_clean = np.asarray(x_clean, dtype=np.float64)
    num = np.sum((np.asarray(y, dtype=np.float64) - x_clean) ** 2, axis=0)
    den = np.sum((np.asarray(x_hat, dtype=np.float64) - x_clean) ** 2, axis=0)
    if np.any(num == 0):
        raise ValueError("observation equals the clean signal; SNR improvement is undefined")
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(num / den)
    return float(out) if np.ndim(out) == 0 else out


def snr_db(x_clean, x_hat):
    """Output SNR ``10 log10(||x||^2 / ||x_hat - x||^2)`` per column."""
    x_clean = np.asarray(x_clean, dtype=np.float64)
    den = np.sum((np.asarray(x_hat) - x_clean) ** 2, axis=0)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.sum(x_clean**2, axis=0) / den)


@dataclass(frozen=True)
class TrainTemplate:
    """Training settings shared by every learned estimator in an experiment."""

    gamma: float = 2e-4
    iterations: int = 1000
    K: int = 10
    mu: float = 2.0
    kernel_order: int = 3
    margin_knots: int = 4

    def config(self, batch: SignalBatch, mode: str, K: int | None = None) -> TrainConfig:
        return TrainConfig(
            batch=batch,
            gamma=self.gamma,
            outer_iterations=self.iterations,
            admm=AdmmConfig(self.mu, self.K if K is None else K),
            mode=mode,
            kernel_order=self.kernel_order,
            margin_knots=self.margin_knots,
        )


@dataclass(frozen=True)
class SweepConfig:
    sigma2_values: tuple = (10**-0.5, 1.0, 10**0.5)
    train_count: int = 100
    test_count: int = 100
    model: LevyModel = field(default_factory=lambda: LevyModel.compound_poisson(0.6))
    estimators: tuple = ESTIMATORS
    train: TrainTemplate = field(default_factory=TrainTemplate)
    n: int = 100
    seed: int = 0
    tv_iterations: int = TV_ITERATIONS
    mmse_points: int = 2048

    def __post_init__(self):
        if not self.sigma2_values:
            raise ValueError("sigma2_values must be nonempty")
        if self.train_count < 1 or self.test_count < 1:
            raise ValueError("train_count and test_count must be >= 1")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ValueError(f"unknown estimators {sorted(unknown)}")

    def cell_seeds(self, index: int) -> tuple[int, int]:
        """(train seed, test seed) for the ``index``-th noise level."""
        ss = np.random.SeedSequence([self.seed, index])
        a, b = ss.generate_state(2)
        return int(a), int(b)

    def to_dict(self) -> dict:
        return {
            "sigma2_values": list(self.sigma2_values),
            "train_count": self.train_count,
            "test_count": self.test_count,
            "model": self.model.to_dict(),
            "estimators": list(self.estimators),
            "train": self.train.__dict__,
            "n": self.n,
            "seed": self.seed,
            "tv_iterations": self.tv_iterations,
            "mmse_points": self.mmse_points,
        }


def preset(name: str, model: LevyModel | None = None, seed: int = 0) -> SweepConfig:
    """``desk``: 100/100 signals, 3 noise levels. ``paper``: 500/500, 9 levels."""
    model = model or LevyModel.compound_poisson(0.6)
    if name == "desk":
        return SweepConfig((10**-0.5, 1.0, 10**0.5), 100, 100, model, seed=seed)
    if name == "paper":
        return SweepConfig(tuple(np.logspace(-0.5, 0.5, 9)), 500, 500, model, seed=seed)
    raise ValueError(f"unknown preset {name!r}")


@dataclass
class CellResult:
    sigma2: float
    estimator: str
    values: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))

    def to_dict(self) -> dict:
        return {
            "sigma2": self.sigma2,
            "estimator": self.estimator,
            "mean_delta_snr_db": self.mean,
            "std_delta_snr_db": self.std,
            "values": np.asarray(self.values).tolist(),
            "params": self.params,
        }


@dataclass
class ExperimentReport:
    cells: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    splines: dict = field(default_factory=dict)

    def get(self, sigma2: float, estimator: str) -> CellResult:
        for c in self.cells:
            if c.estimator == estimator and math.isclose(c.sigma2, sigma2, rel_tol=1e-12):
                return c
        raise KeyError((sigma2, estimator))

    def mean(self, sigma2: float, estimator: str) -> float:
        return self.get(sigma2, estimator).mean

    def table(self) -> str:
        est = list(dict.fromkeys(c.estimator for c in self.cells))
        sig = list(dict.fromkeys(c.sigma2 for c in self.cells))
        lines = ["sigma2    " + "".join(f"{e:>14}" for e in est)]
        for s in sig:
            row = f"{s:<10.4g}"
            for e in est:
                try:
                    row += f"{self.mean(s, e):14.3f}"
                except KeyError:
                    row += f"{'-':>14}"
            lines.append(row)
        return "\n".join(lines)

    def to_dict(self, timing: bool = True) -> dict:
        meta = dict(self.metadata)
        if not timing:
            meta.pop("wall_time_s", None)
        return {"metadata": meta, "cells": [c.to_dict() for c in self.cells]}

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sigma2", "estimator", "signal_idx", "delta_snr_db"])
            for c in self.cells:
                for i, v in enumerate(np.asarray(c.values)):
                    w.writerow([repr(float(c.sigma2)), c.estimator, i, repr(float(v))])


def _denoise(shrink, Y, K: int, mu: float) -> np.ndarray:
    return admm_run(Y, shrink, AdmmConfig(mu, K), factorize(Y.shape[0], mu)).x_final


def _spline_params(s: ShrinkageSpline) -> dict:
    return {"spline_sha256": s.digest(), "delta": s.delta, "m_half": s.m_half, "mode": s.mode}


def _evaluate_baselines(cfg: SweepConfig, test: SignalBatch, sigma2: float, estimators) -> list:
    out = []
    Y, X = test.noisy, test.clean
    if "MMSE" in estimators:
        xh = mmse_smoother(Y, sigma2, IncrementDensity(cfg.model), _grid(Y, sigma2, cfg.mmse_points))
        out.append(CellResult(sigma2, "MMSE", snr_improvement(X, xh, Y), {"grid_points": cfg.mmse_points}))
    if "LMMSE" in estimators:
        out.append(CellResult(sigma2, "LMMSE", snr_improvement(X, lmmse_denoise(Y, sigma2), Y)))
    if "TV" in estimators:
        tv_cfg = AdmmConfig(cfg.train.mu, cfg.tv_iterations)
        lam, xh = tv_oracle_lambda(Y, X, tv_cfg)
        out.append(CellResult(sigma2, "TV", snr_improvement(X, xh, Y),
                              {"lambda": np.atleast_1d(lam).tolist(), "K": cfg.tv_iterations}))
    return out


def _grid(Y, sigma2, points):
    from .baselines import default_grid

    return default_grid(Y, sigma2, points)


def _sweep_cell(cfg: SweepConfig, index: int, sigma2: float):
    s_train, s_test = cfg.cell_seeds(index)
    test = make_batch(cfg.model, cfg.n, cfg.test_count, sigma2, s_test)
    cells, splines = [], {}
    learned = [(e, m) for e, m in (("CADMM", CONSTRAINED), ("ADMM", UNCONSTRAINED)) if e in cfg.estimators]
    if learned:
        train_batch = make_batch(cfg.model, cfg.n, cfg.train_count, sigma2, s_train)
        for name, mode in learned:
            res = train(cfg.train.config(train_batch, mode))
            xh = _denoise(res.spline, test.noisy, cfg.train.K, cfg.train.mu)
            params = _spline_params(res.spline)
            params.update(train_seed=s_train, final_loss=res.loss_history[-1])
            cells.append(CellResult(sigma2, name, snr_improvement(test.clean, xh, test.noisy), params))
            splines[f"{name}@{sigma2:.6g}"] = res.spline
    cells.extend(_evaluate_baselines(cfg, test, sigma2, cfg.estimators))
    for c in cells:
        c.params.setdefault("test_seed", s_test)
    return cells, splines


def run_noise_sweep(cfg: SweepConfig, threads: int = 1) -> ExperimentReport:
    """Train and evaluate every requested estimator at every noise level.

    Each noise level draws its own training and test batches from seeds
    derived from ``(cfg.seed, level index)``, so results do not depend on
    ``threads``.
    """
    t0 = time.perf_counter()
    jobs = list(enumerate(cfg.sigma2_values))
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(lambda j: _sweep_cell(cfg, *j), jobs))
    else:
        results = [_sweep_cell(cfg, *j) for j in jobs]
    report = ExperimentReport(metadata={"experiment": "noise_sweep", "config": cfg.to_dict()})
    for cells, splines in results:
        report.cells.extend(cells)
        report.splines.update(splines)
    report.metadata["wall_time_s"] = time.perf_counter() - t0
    return report


def run_scale_once(cfg: SweepConfig, train_sigma2: float = 1.0, direct: bool = True,
                   root_tol: float = 1e-10) -> ExperimentReport:
    """Learn once at ``train_sigma2`` and reuse the result at every noise level.

    ``CADMM-scaled`` rescales the constrained spline with
    ``lambda = sigma2 / train_sigma2``; ``ADMM-reused`` applies the
    unconstrained spline unchanged. With ``direct`` a constrained spline is
    also trained at each level (``CADMM-direct``) for comparison.
    """
    t0 = time.perf_counter()
    ss = np.random.SeedSequence([cfg.seed, 1_000_003])
    s_train, *_ = (int(s) for s in ss.generate_state(1))
    base_batch = make_batch(cfg.model, cfg.n, cfg.train_count, train_sigma2, s_train)
    base_c = train(cfg.train.config(base_batch, CONSTRAINED)).spline
    base_u = train(cfg.train.config(base_batch, UNCONSTRAINED)).spline if "ADMM" in cfg.estimators else None

    report = ExperimentReport(metadata={
        "experiment": "scale_once", "config": cfg.to_dict(), "train_sigma2": train_sigma2,
        "train_seed": s_train,
    })
    report.splines["CADMM@train"] = base_c
    if base_u is not None:
        report.splines["ADMM@train"] = base_u
    K, mu = cfg.train.K, cfg.train.mu
    for index, sigma2 in enumerate(cfg.sigma2_values):
        s_tr, s_test = cfg.cell_seeds(index)
        test = make_batch(cfg.model, cfg.n, cfg.test_count, sigma2, s_test)
        X, Y = test.clean, test.noisy
        lam = sigma2 / train_sigma2
        scaled = base_c if lam == 1.0 else ScaledShrinkage(base_c, lam, root_tol)
        params = dict(_spline_params(base_c), **{"lambda": lam, "test_seed": s_test})
        report.cells.append(CellResult(sigma2, "CADMM-scaled",
                                       snr_improvement(X, _denoise(scaled, Y, K, mu), Y), params))
        if base_u is not None:
            report.cells.append(CellResult(sigma2, "ADMM-reused",
                                           snr_improvement(X, _denoise(base_u, Y, K, mu), Y),
                                           dict(_spline_params(base_u), test_seed=s_test)))
        if direct:
            if lam == 1.0:
                spl = base_c
            else:
                tb = make_batch(cfg.model, cfg.n, cfg.train_count, sigma2, s_tr)
                spl = train(cfg.train.config(tb, CONSTRAINED)).spline
            report.splines[f"CADMM-direct@{sigma2:.6g}"] = spl
            report.cells.append(CellResult(sigma2, "CADMM-direct",
                                           snr_improvement(X, _denoise(spl, Y, K, mu), Y),
                                           dict(_spline_params(spl), test_seed=s_test)))
        baselines = [e for e in cfg.estimators if e in ("MMSE", "LMMSE", "TV")]
        report.cells.extend(_evaluate_baselines(cfg, test, sigma2, baselines))
    report.metadata["wall_time_s"] = time.perf_counter() - t0
    return report


@dataclass
class KTestResult:
    k_train: int
    sigma2: float
    k_test: list
    curves: dict
    metadata: dict = field(default_factory=dict)

    def variation(self, mode: str, lo: int, hi: int) -> float:
        vals = [v for k, v in zip(self.k_test, self.curves[mode]) if lo <= k <= hi]
        return float(max(vals) - min(vals))

    def to_dict(self) -> dict:
        return {"k_train": self.k_train, "sigma2": self.sigma2, "k_test": list(self.k_test),
                "curves": {m: list(map(float, c)) for m, c in self.curves.items()},
                "metadata": self.metadata}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k_test"] + list(self.curves))
            for i, k in enumerate(self.k_test):
                w.writerow([k] + [repr(float(self.curves[m][i])) for m in self.curves])


def run_ktest_stability(k_train: int = 2, sigma2: float = 10.0, k_test_values=range(2, 51),
                        model: LevyModel | None = None, train_count: int = 100,
                        test_count: int = 100, template: TrainTemplate | None = None,
                        n: int = 100, seed: int = 0) -> KTestResult:
    """Mean output SNR (dB) against the number of test-time ADMM iterations."""
    model = model or LevyModel.compound_poisson(0.6)
    template = template or TrainTemplate()
    s_train, s_test = (int(s) for s in np.random.SeedSequence([seed, 2_000_003]).generate_state(2))
    tb = make_batch(model, n, train_count, sigma2, s_train)
    test = make_batch(model, n, test_count, sigma2, s_test)
    k_test = sorted(set(int(k) for k in k_test_values))
    curves, meta = {}, {"train_seed": s_train, "test_seed": s_test, "model": model.to_dict()}
    for name, mode in (("CADMM", CONSTRAINED), ("ADMM", UNCONSTRAINED)):
        spl = train(template.config(tb, mode, K=k_train)).spline
        tr = admm_run(test.noisy, spl, AdmmConfig(template.mu, max(k_test), record_trace=True))
        curves[name] = [float(np.mean(snr_db(test.clean, tr.x_per_iter[k - 1]))) for k in k_test]
        meta[f"{name}_spline_sha256"] = spl.digest()
    return KTestResult(k_train, sigma2, k_test, curves, meta)


def default_v_grid(spline: ShrinkageSpline, points: int = 20001) -> np.ndarray:
    """Symmetric grid over the knot range (odd size, so it contains 0)."""
    points = points | 1
    return np.linspace(-spline.x_max, spline.x_max, points)


def convergence_trace(spline: ShrinkageSpline, y, penalty=None, iters: int = 50,
                      mu: float = 2.0) -> np.ndarray:
    """Objective value after each of ``iters`` ADMM iterations.

    The objective uses the penalty recovered from ``spline`` unless one is
    supplied.
    """
    rep = check_firmly_nonexpansive(spline)
    if not rep.ok:
        raise ValueError("spline is not firmly nonexpansive: " + "; ".join(rep.messages))
    if penalty is None:
        penalty = recover_penalty(spline, default_v_grid(spline))
    y = np.asarray(y, dtype=np.float64)
    tr = admm_run(y, spline, AdmmConfig(mu, iters), factorize(y.shape[0], mu), penalty=penalty)
    return np.asarray(tr.cost_per_iter)
