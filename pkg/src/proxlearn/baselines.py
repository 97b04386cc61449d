"""Reference estimators: Wiener (LMMSE), total variation and grid MMSE.

Every estimator can be called as ``estimator(y, sigma2, **params)`` with
``y`` a signal or an ``(N, B)`` batch.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .admm import AdmmConfig, TridiagFactorization, admm_run, factorize
from .signals import LevyModel
from .splines import SoftThreshold

__all__ = [
    "lmmse_denoise",
    "tv_denoise",
    "tv_oracle_lambda",
    "GridSpec",
    "IncrementDensity",
    "default_grid",
    "mmse_smoother",
    "TV_ITERATIONS",
]

TV_ITERATIONS = 2000

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


def lmmse_denoise(y, sigma2: float) -> np.ndarray:
    """Solve ``(I + sigma2 L^T L) x = y``."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    y = np.asarray(y, dtype=np.float64)
    return factorize(y.shape[0], sigma2).solve(y)


def tv_denoise(y, lam, admm: AdmmConfig | None = None,
               fact: TridiagFactorization | None = None) -> np.ndarray:
    """Minimizer of ``1/2 ||y - x||^2 + lam ||Lx||_1`` via ADMM.

    ``lam`` may be a scalar or one value per column of ``y``.
    """
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0):
        raise ValueError("lam must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    if admm is None:
        admm = AdmmConfig(2.0, TV_ITERATIONS)
    if fact is None:
        fact = factorize(y.shape[0], admm.mu)
    shrink = SoftThreshold(lam / admm.mu)
    return admm_run(y, shrink, AdmmConfig(admm.mu, admm.iterations), fact).x_final


def tv_oracle_lambda(y, x_clean, admm: AdmmConfig | None = None,
                     fact: TridiagFactorization | None = None,
                     lam_range=(1e-3, 1e2), evaluations: int = 40):
    """Per-signal TV parameter maximizing the SNR against ``x_clean``.

    Golden-section search on ``log(lam)``; the budget of ``evaluations``
    includes both interval ends. Columns of a batch are searched in
    lockstep. Returns ``(lam_best, x_hat)``; the best evaluated point wins.
    """
    y = np.asarray(y, dtype=np.float64)
    x_clean = np.asarray(x_clean, dtype=np.float64)
    single = y.ndim == 1
    Y = y[:, None] if single else y
    X = x_clean[:, None] if single else x_clean
    if admm is None:
        admm = AdmmConfig(2.0, TV_ITERATIONS)
    if fact is None:
        fact = factorize(Y.shape[0], admm.mu)
    if evaluations < 4:
        raise ValueError("need at least 4 evaluations")
    nb = Y.shape[1]

    best_err = np.full(nb, np.inf)
    best_lam = np.zeros(nb)
    best_x = np.zeros_like(Y)

    def evaluate(log_lam):
        lam = np.exp(log_lam)
        xh = tv_denoise(Y, lam, admm, fact)
        err = np.sum((xh - X) ** 2, axis=0)
        better = err < best_err
        best_err[better] = err[better]
        best_lam[better] = lam[better]
        best_x[:, better] = xh[:, better]
        return err

    a = np.full(nb, math.log(lam_range[0]))
    b = np.full(nb, math.log(lam_range[1]))
    evaluate(a)
    evaluate(b)
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc = evaluate(c)
    fd = evaluate(d)
    for _ in range(evaluations - 4):
        left = fc < fd
        # keep [a, d] where c is better, else [c, b]
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new = np.where(left, b - _INV_PHI * (b - a), a + _INV_PHI * (b - a))
        fnew = evaluate(new)
        c, d, fc, fd = (
            np.where(left, new, d),
            np.where(left, c, new),
            np.where(left, fnew, fd),
            np.where(left, fc, fnew),
        )
    if single:
        return float(best_lam[0]), best_x[:, 0]
    return best_lam, best_x


@dataclass(frozen=True)
class GridSpec:
    lo: float
    hi: float
    points: int = 2048

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("grid needs lo < hi")
        if self.points < 16:
            raise ValueError("grid too coarse: need at least 16 points")

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / (self.points - 1)

    def aligned(self, anchor: float = 0.0) -> np.ndarray:
        """Nodes with the same spacing, shifted so that ``anchor`` is a node."""
        h = self.step
        lo = anchor - math.ceil((anchor - self.lo) / h) * h
        return lo + h * np.arange(self.points)


@dataclass(frozen=True)
class IncrementDensity:
    """``p_U = atom * delta_0 + (1 - atom) N(0, 1)``."""

    model: LevyModel

    @property
    def atom_at_zero(self) -> float:
        return self.model.zero_probability

    @property
    def continuous_mass(self) -> float:
        return 1.0 - self.atom_at_zero


def default_grid(y, sigma2: float, points: int = 2048, anchor: float = 0.0) -> GridSpec:
    """Observed range padded by ``5 (sigma + sqrt(N))`` on each side."""
    y = np.asarray(y, dtype=np.float64)
    pad = 5.0 * (math.sqrt(sigma2) + math.sqrt(y.shape[0]))
    return GridSpec(min(float(y.min()), anchor) - pad, max(float(y.max()), anchor) + pad, points)


def mmse_smoother(y, sigma2: float, density: IncrementDensity, grid: GridSpec | None = None,
                  x0: float = 0.0, return_info: bool = False):
    """Posterior mean of a Lévy process observed in white Gaussian noise.

    Sum-product on the chain ``x_0 = x0 -> x_1 -> ... -> x_N`` with
    transition ``p_U(x_{i+1} - x_i)``, discretized on ``grid`` (shifted so
    that ``x0`` is a node). The Dirac part of ``p_U`` is applied exactly as
    a weighted identity. Batches are processed column-wise in one sweep.
    """
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    Y = y[:, None] if single else y
    n, nb = Y.shape
    if grid is None:
        grid = default_grid(Y, sigma2, anchor=x0)
    nodes = grid.aligned(x0)
    h = grid.step
    G = nodes.size

    atom = density.atom_at_zero
    # Gaussian transition kernel on the node lattice, truncated at 12 sd
    half = min(G - 1, int(math.ceil(12.0 / h)))
    kern = np.exp(-0.5 * (h * np.arange(-half, half + 1)) ** 2)
    kern *= (1.0 - atom) / kern.sum()

    def propagate(m):
        # m has shape (nb, G); returns sum_x m(x) p(x' | x)
        out = convolve1d(m, kern, axis=1, mode="constant", cval=0.0)
        if atom > 0:
            out += atom * m
        return out

    def emission(i):
        return np.exp(-0.5 * (nodes[None, :] - Y[i][:, None]) ** 2 / sigma2)

    start = np.zeros((nb, G))
    start[:, int(round((x0 - nodes[0]) / h))] = 1.0
    fwd = np.empty((n, nb, G))
    log_evidence = np.zeros(nb)
    m = propagate(start)
    for i in range(n):
        m = m * emission(i)
        z = m.sum(axis=1)
        log_evidence += np.log(z)
        m /= z[:, None]
        fwd[i] = m
        if i + 1 < n:
            m = propagate(m)

    means = np.empty((n, nb))
    boundary = 0.0
    back = np.ones((nb, G))
    for i in range(n - 1, -1, -1):
        post = fwd[i] * back
        post /= post.sum(axis=1, keepdims=True)
        means[i] = post @ nodes
        boundary = max(boundary, float(np.max(post[:, 0] + post[:, -1])))
        if i > 0:
            back = propagate(back * emission(i))  # kernel is symmetric
            back /= back.max(axis=1, keepdims=True)
    if boundary > 1e-6:
        warnings.warn(
            f"MMSE grid boundary bins carry {boundary:.2g} of posterior mass; widen the grid",
            RuntimeWarning,
            stacklevel=2,
        )
    out = means[:, 0] if single else means
    if return_info:
        return out, {"log_evidence": log_evidence, "boundary_mass": boundary, "step": h}
    return out
