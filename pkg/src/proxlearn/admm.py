"""Generalized ADMM for ``min_x 1/2 ||y - x||^2 + sum_i Phi([Lx]_i)``.

One iteration, with ``T`` standing in for the proximal step::

    x <- (I + mu L^T L)^{-1} (y + L^T (mu u + alpha))
    alpha <- alpha - mu (L x - u)
    u <- T(L x - alpha / mu)

``T`` is used as is: any ``sigma^2 / mu`` scaling of a hand-designed
proximal map must already be folded into it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded

from .signals import apply_L, apply_Lt

__all__ = [
    "AdmmConfig",
    "AdmmTrace",
    "TridiagFactorization",
    "factorize",
    "admm_run",
    "cost_eval",
    "system_matrix",
]


@dataclass(frozen=True)
class AdmmConfig:
    mu: float = 2.0
    iterations: int = 10
    record_trace: bool = False

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def system_matrix(n: int, mu: float) -> np.ndarray:
    """Dense ``I + mu L^T L``; for tests and small problems only."""
    d = np.full(n, 1.0 + 2.0 * mu)
    d[-1] = 1.0 + mu
    return np.diag(d) - mu * (np.eye(n, k=1) + np.eye(n, k=-1))


@dataclass(frozen=True)
class TridiagFactorization:
    """Banded Cholesky factor of ``I + mu L^T L``."""

    n: int
    mu: float
    _factor: np.ndarray = field(repr=False)

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != self.n:
            raise ValueError(f"right-hand side has length {b.shape[0]}, expected {self.n}")
        return cho_solve_banded((self._factor, False), b, check_finite=False)


def factorize(n: int, mu: float) -> TridiagFactorization:
    if not mu > 0:
        raise ValueError("mu must be positive")
    ab = np.zeros((2, n))
    ab[0, 1:] = -mu
    ab[1, :] = 1.0 + 2.0 * mu
    ab[1, -1] = 1.0 + mu
    return TridiagFactorization(n, float(mu), cholesky_banded(ab, lower=False))


@dataclass
class AdmmTrace:
    x_final: np.ndarray
    v_per_iter: list = field(default_factory=list)
    x_per_iter: list | None = None
    cost_per_iter: list | None = None

    def to_dict(self) -> dict:
        d = {"x_final": self.x_final.T.tolist()}
        if self.cost_per_iter is not None:
            d["cost_per_iter"] = np.asarray(self.cost_per_iter).tolist()
        return d


def admm_run(y, shrink, config: AdmmConfig, fact: TridiagFactorization | None = None,
             penalty=None) -> AdmmTrace:
    """Run exactly ``config.iterations`` generalized ADMM iterations.

    ``y`` is a signal or an ``(N, B)`` batch; all columns are processed
    together. Starts from ``u = alpha = 0``. When ``penalty`` (a
    :class:`~proxlearn.splines.PenaltyCurve` or any callable ``Phi``) is
    given, the objective is recorded after every x-update.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if fact is None:
        fact = factorize(n, config.mu)
    if fact.n != n or fact.mu != config.mu:
        raise ValueError(
            f"factorization built for n={fact.n}, mu={fact.mu}; problem has n={n}, mu={config.mu}"
        )
    mu = config.mu
    u = np.zeros_like(y)
    alpha = np.zeros_like(y)
    trace = AdmmTrace(
        x_final=y,
        x_per_iter=[] if config.record_trace else None,
        cost_per_iter=[] if penalty is not None else None,
    )
    x = y
    for _ in range(config.iterations):
        x = fact.solve(y + apply_Lt(mu * u + alpha))
        Lx = apply_L(x)
        alpha = alpha - mu * (Lx - u)
        v = Lx - alpha / mu
        u = shrink(v)
        if config.record_trace:
            trace.v_per_iter.append(v)
            trace.x_per_iter.append(x)
        if penalty is not None:
            trace.cost_per_iter.append(cost_eval(x, y, penalty))
    trace.x_final = x
    return trace


def cost_eval(x, y, penalty) -> float | np.ndarray:
    """``1/2 ||y - x||^2 + sum_i Phi([Lx]_i)``, per column for batches."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return 0.5 * np.sum((y - x) ** 2, axis=0) + np.sum(penalty(apply_L(x)), axis=0)
