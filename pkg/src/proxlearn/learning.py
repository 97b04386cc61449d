"""Learning shrinkage splines by backpropagating through unrolled ADMM.

The loss for a batch is ``J(c) = 1/2 sum_l ||x^(K)(c, y_l) - x_l||^2``.
With ``w = alpha + mu u`` the unrolled iteration reads

    x^(k+1) = M (y + L^T w^(k)),          M = (I + mu L^T L)^{-1}
    v^(k+1) = 2 L x^(k+1) - w^(k) / mu
    w^(k+1) = w^(k) - mu L x^(k+1) + mu T(v^(k+1); c)

so the gradient is accumulated backwards from ``r = A (x^(K) - x)``,
``A = L M``, through ``B^(k) = I - mu A L^T + (2 mu A L^T - I) D^(k)``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .admm import AdmmConfig, TridiagFactorization, factorize
from .signals import SignalBatch, apply_L, apply_Lt
from .splines import ANTISYMMETRIC, GENERAL, ShrinkageSpline, check_firmly_nonexpansive

__all__ = [
    "GradientResult",
    "backprop_gradient",
    "batch_gradient",
    "unrolled_loss",
    "ConstraintSet",
    "project_to_S",
    "ProjectionError",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "train",
    "knot_range_from_data",
]

log = logging.getLogger(__name__)


@dataclass
class GradientResult:
    grad: np.ndarray
    loss: float
    # False when K < 2: no coefficient influences x^(K) and the gradient is zero
    has_terms: bool = True


def _as_columns(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def _per_signal(spline: ShrinkageSpline, X, Y, admm: AdmmConfig,
                fact: TridiagFactorization) -> tuple[np.ndarray, np.ndarray]:
    """Per-column gradients ``(B, n_coeffs)`` and losses ``(B,)``."""
    X, Y = _as_columns(X), _as_columns(Y)
    if X.shape != Y.shape:
        raise ValueError(f"clean/noisy shape mismatch {X.shape} vs {Y.shape}")
    n, nb = Y.shape
    if fact.n != n or fact.mu != admm.mu:
        raise ValueError("factorization does not match signal length / mu")
    mu, K = admm.mu, admm.iterations

    u = np.zeros_like(Y)
    alpha = np.zeros_like(Y)
    locs = []
    x = Y
    for _ in range(K):
        x = fact.solve(Y + apply_Lt(mu * u + alpha))
        Lx = apply_L(x)
        alpha = alpha - mu * (Lx - u)
        loc = spline.local_weights(Lx - alpha / mu, deriv=True)
        u = spline._value(loc)
        locs.append(loc)

    resid = x - X
    losses = 0.5 * np.sum(resid**2, axis=0)
    grads = np.zeros((nb, spline.n_coeffs))
    if K < 2:
        return grads, losses

    groups = np.broadcast_to(np.arange(nb), (n, nb))
    r = apply_L(fact.solve(resid))
    for k in range(K - 1, 0, -1):
        loc = locs[k - 1]  # at v^(k)
        grads += mu * spline.basis_apply(None, r, groups, nb, loc=loc)
        if k == 1:
            break
        # B^(k) r with G = A L^T = L M L^T
        dr = spline._slope(loc) * r
        r = r - dr + mu * apply_L(fact.solve(apply_Lt(2.0 * dr - r)))
    return grads, losses


def backprop_gradient(spline: ShrinkageSpline, x, y, admm: AdmmConfig,
                      fact: TridiagFactorization | None = None) -> GradientResult:
    """Gradient of ``1/2 ||x^(K)(c, y) - x||^2`` with respect to the coefficients."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("backprop_gradient expects two vectors of equal length")
    if fact is None:
        fact = factorize(y.size, admm.mu)
    g, l = _per_signal(spline, x, y, admm, fact)
    return GradientResult(g[0], float(l[0]), admm.iterations >= 2)


def batch_gradient(spline: ShrinkageSpline, batch: SignalBatch, admm: AdmmConfig,
                   fact: TridiagFactorization | None = None) -> GradientResult:
    """Sum of per-signal gradients and losses.

    The reduction over signals uses exactly rounded summation, so the
    result does not depend on the order of the signals in the batch.
    """
    if batch.count == 0:
        raise ValueError("empty batch")
    if fact is None:
        fact = factorize(batch.n, admm.mu)
    g, l = _per_signal(spline, batch.clean, batch.noisy, admm, fact)
    grad = np.array([math.fsum(col) for col in g.T])
    return GradientResult(grad, math.fsum(l), admm.iterations >= 2)


def unrolled_loss(spline: ShrinkageSpline, X, Y, admm: AdmmConfig,
                  fact: TridiagFactorization | None = None) -> float:
    """``J(c)`` alone (forward pass only)."""
    X, Y = _as_columns(X), _as_columns(Y)
    if fact is None:
        fact = factorize(Y.shape[0], admm.mu)
    from .admm import admm_run

    xk = admm_run(Y, spline, AdmmConfig(admm.mu, admm.iterations), fact).x_final
    return math.fsum(0.5 * np.sum((xk - X) ** 2, axis=0))


# -- constraint set ---------------------------------------------------------


@dataclass(frozen=True)
class ConstraintSet:
    """``0 <= c_m - c_{m-1} <= delta`` on the full coefficient sequence.

    In antisymmetric mode the stored vector is ``c_1..c_M`` and the pair
    ``(c_0, c_1)`` with ``c_0 = 0`` is included, i.e. ``0 <= c_1 <= delta``;
    the mirrored pairs are then implied.
    """

    delta: float
    m_half: int
    mode: str = ANTISYMMETRIC

    @classmethod
    def for_spline(cls, spline: ShrinkageSpline) -> "ConstraintSet":
        return cls(spline.delta, spline.m_half, spline.mode)

    def increments(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=np.float64)
        if self.mode == ANTISYMMETRIC:
            return np.diff(c, prepend=0.0)
        return np.diff(c)

    def violation(self, c) -> float:
        d = self.increments(c)
        return float(max(0.0, -d.min(), (d - self.delta).max()))

    def contains(self, c, tol: float = 1e-10) -> bool:
        return self.violation(c) <= tol


class ProjectionError(RuntimeError):
    pass


def _project_pairs(c: np.ndarray, first: int, delta: float, anchored: bool) -> np.ndarray:
    """Exact projection onto the slabs of the disjoint pairs ``(first + 2j - 1, first + 2j)``.

    Pair ``(m-1, m)`` constrains ``c[m] - c[m-1]``; with ``anchored`` the
    index ``-1`` stands for the fixed value 0.
    """
    out = c.copy()
    hi_idx = np.arange(first, c.size, 2)
    if anchored and first == 0:
        out[0] = min(max(c[0], 0.0), delta)
        hi_idx = hi_idx[1:]
    lo_idx = hi_idx - 1
    d = c[hi_idx] - c[lo_idx]
    shift = 0.5 * (np.clip(d, 0.0, delta) - d)
    out[hi_idx] += shift
    out[lo_idx] -= shift
    return out


def project_to_S(z, S: ConstraintSet, tol: float = 1e-12, max_iter: int = 200_000) -> np.ndarray:
    """Euclidean projection onto ``S`` by Dykstra's algorithm.

    The pairwise slabs are split into two families of non-overlapping
    pairs (odd / even ``m``); each family has a closed-form projection.
    Stops when an iteration moves the estimate by less than ``tol``, then
    snaps the result onto ``S`` by clipping increments, which moves it by
    at most ``M * tol``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    z = np.asarray(z, dtype=np.float64)
    anchored = S.mode == ANTISYMMETRIC
    if S.contains(z, 0.0):
        return z.copy()
    # in general mode pair (m-1, m) is indexed by m = 1..len-1
    starts = (0, 1) if anchored else (1, 2)
    x = z.copy()
    p = [np.zeros_like(z), np.zeros_like(z)]
    for it in range(max_iter):
        x_prev = x
        for j, s in enumerate(starts):
            y = _project_pairs(x + p[j], s, S.delta, anchored)
            p[j] = x + p[j] - y
            x = y
        if np.max(np.abs(x - x_prev)) < tol:
            break
    else:
        raise ProjectionError(f"Dykstra projection did not converge in {max_iter} iterations")
    d = np.clip(S.increments(x), 0.0, S.delta)
    if anchored:
        return np.cumsum(d)
    return x[0] + np.concatenate([[0.0], np.cumsum(d)])


# -- training ----------------------------------------------------------------


def knot_range_from_data(batch: SignalBatch, delta: float, margin_knots: int = 4) -> int:
    """``M = ceil(max |L y| / delta) + margin_knots``."""
    if batch.count == 0:
        raise ValueError("empty batch")
    peak = float(np.max(np.abs(apply_L(batch.noisy))))
    return int(math.ceil(peak / delta)) + int(margin_knots)


UNCONSTRAINED = "unconstrained"
CONSTRAINED = "constrained"


@dataclass
class TrainConfig:
    """Settings for (projected) gradient descent on the spline coefficients.

    ``delta`` defaults to ``sigma / 2`` and ``m_half`` to
    :func:`knot_range_from_data`. Unconstrained training learns a general
    ``2M+1``-coefficient spline; constrained training learns an
    antisymmetric one and projects onto :class:`ConstraintSet` every step.
    """

    batch: SignalBatch
    gamma: float = 2e-4
    outer_iterations: int = 1000
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    mode: str = CONSTRAINED
    init: np.ndarray | None = None
    delta: float | None = None
    m_half: int | None = None
    kernel_order: int = 3
    margin_knots: int = 4
    projection_tol: float = 1e-12
    divergence_factor: float = 1e6
    seed: int | None = None

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        if self.outer_iterations < 1:
            raise ValueError("outer_iterations must be >= 1")
        if self.mode not in (UNCONSTRAINED, CONSTRAINED):
            raise ValueError(f"unknown training mode {self.mode!r}")

    @property
    def spline_mode(self) -> str:
        return ANTISYMMETRIC if self.mode == CONSTRAINED else GENERAL

    def resolved_delta(self) -> float:
        return self.delta if self.delta is not None else 0.5 * self.batch.sigma

    def resolved_m_half(self) -> int:
        if self.m_half is not None:
            return self.m_half
        return knot_range_from_data(self.batch, self.resolved_delta(), self.margin_knots)

    def echo(self) -> dict:
        return {
            "gamma": self.gamma,
            "iters": self.outer_iterations,
            "K": self.admm.iterations,
            "mu": self.admm.mu,
            "mode": self.mode,
            "delta": self.resolved_delta(),
            "m_half": self.resolved_m_half(),
            "kernel_order": self.kernel_order,
            "sigma2": self.batch.noise_variance,
            "train_count": self.batch.count,
            "seed": self.seed if self.seed is not None else self.batch.seed,
        }


@dataclass
class TrainResult:
    spline: ShrinkageSpline
    loss_history: list
    wall_time_s: float
    config: dict

    def report(self) -> dict:
        return {
            "loss_history": self.loss_history,
            "config": self.config,
            "wall_time_s": self.wall_time_s,
            "final_coeffs": self.spline.coeffs.tolist(),
        }


class TrainingDiverged(RuntimeError):
    pass


def train(config: TrainConfig, callback=None) -> TrainResult:
    """Learn spline coefficients; returns the final spline and ``J`` per iteration.

    ``loss_history[i]`` is ``J(c^(i))``, evaluated before the i-th update.
    ``callback(i, coeffs)`` is called after every update.
    """
    t0 = time.perf_counter()
    delta = config.resolved_delta()
    m_half = config.resolved_m_half()
    mode = config.spline_mode
    echo = config.echo()
    meta = {
        "gamma": config.gamma,
        "iters": config.outer_iterations,
        "K": config.admm.iterations,
        "mu": config.admm.mu,
        "seed": echo["seed"],
        "constrained": config.mode == CONSTRAINED,
    }
    spline = ShrinkageSpline.identity(
        delta, m_half, mode, config.kernel_order,
        trained_sigma2=config.batch.noise_variance, training_meta=meta,
    )
    if config.init is not None:
        spline = spline.with_coeffs(config.init)

    S = ConstraintSet.for_spline(spline)
    if config.mode == CONSTRAINED and not S.contains(spline.coeffs):
        spline = spline.with_coeffs(project_to_S(spline.coeffs, S, config.projection_tol))

    fact = factorize(config.batch.n, config.admm.mu)
    history = []
    c = spline.coeffs
    for i in range(config.outer_iterations):
        res = batch_gradient(spline, config.batch, config.admm, fact)
        history.append(res.loss)
        if not math.isfinite(res.loss) or res.loss > config.divergence_factor * max(history[0], 1e-300):
            raise TrainingDiverged(
                f"loss {res.loss:.4g} at iteration {i} exceeds {config.divergence_factor:g} x "
                f"initial loss {history[0]:.4g}; reduce gamma (currently {config.gamma:g})"
            )
        c = c - config.gamma * res.grad
        if config.mode == CONSTRAINED:
            c = project_to_S(c, S, config.projection_tol)
        spline = spline.with_coeffs(c)
        if callback is not None:
            callback(i, spline.coeffs)
        if log.isEnabledFor(logging.DEBUG):
            log.debug("iter %d loss %.6g |grad| %.3g", i, res.loss, np.linalg.norm(res.grad))

    if config.mode == CONSTRAINED:
        rep = check_firmly_nonexpansive(spline)
        if not rep.ok:
            raise RuntimeError("constrained training produced a spline that is not firmly "
                               "nonexpansive: " + "; ".join(rep.messages))
    return TrainResult(spline, history, time.perf_counter() - t0, echo)
