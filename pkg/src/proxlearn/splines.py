"""B-spline kernels and spline-parametrized shrinkage functions.

A shrinkage spline is the 1-D map

    T(x) = sum_m c_m beta^n(x / delta - m),   m = -M..M

evaluated on the knot range ``|x| <= (M - (n+1)/2) * delta`` and extended by
its boundary value outside it. In antisymmetric mode only ``c_1..c_M`` are
stored and ``c_0 = 0``, ``c_{-m} = -c_m``.

Shrinkage objects in this package share a tiny protocol: they are callables
acting entrywise on arrays and expose ``deriv(x)``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.special import comb

__all__ = [
    "kernel_eval",
    "kernel_deriv",
    "BSplineKernel",
    "ShrinkageSpline",
    "SoftThreshold",
    "Identity",
    "FNEReport",
    "check_firmly_nonexpansive",
    "ScaledShrinkage",
    "scale_operator",
    "PenaltyCurve",
    "recover_penalty",
    "GENERAL",
    "ANTISYMMETRIC",
]

GENERAL = "general"
ANTISYMMETRIC = "antisymmetric"


def kernel_eval(n: int, x):
    """Centered B-spline of order ``n`` at ``x`` (scalar or array).

    ``beta^0`` is the indicator of ``[-1/2, 1/2)`` so that integer shifts
    sum to one everywhere.
    """
    if n < 0:
        raise ValueError("B-spline order must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if n == 0:
        out = ((x >= -0.5) & (x < 0.5)).astype(np.float64)
    elif n == 1:
        out = np.maximum(0.0, 1.0 - np.abs(x))
    elif n == 2:
        a = np.abs(x)
        out = np.where(a < 0.5, 0.75 - a * a, np.where(a < 1.5, 0.5 * (1.5 - a) ** 2, 0.0))
    elif n == 3:
        a = np.abs(x)
        out = np.where(
            a < 1.0,
            2.0 / 3.0 - a * a + 0.5 * a**3,
            np.where(a < 2.0, (2.0 - a) ** 3 / 6.0, 0.0),
        )
    else:
        # truncated-power form; symmetric so evaluate on -|x| to reduce cancellation
        t = -np.abs(x) + 0.5 * (n + 1)
        out = np.zeros_like(t)
        for k in range(n + 2):
            out += (-1) ** k * comb(n + 1, k) * np.maximum(0.0, t - k) ** n
        out /= math.factorial(n)
        out = np.where(np.abs(x) < 0.5 * (n + 1), np.maximum(out, 0.0), 0.0)
    return out[()] if out.ndim == 0 else out


def kernel_deriv(n: int, x):
    """Derivative of ``beta^n``: ``beta^{n-1}(x + 1/2) - beta^{n-1}(x - 1/2)``."""
    if n < 1:
        raise ValueError("derivative needs order >= 1")
    x = np.asarray(x, dtype=np.float64)
    return kernel_eval(n - 1, x + 0.5) - kernel_eval(n - 1, x - 0.5)


@dataclass(frozen=True)
class BSplineKernel:
    order: int = 3

    def __post_init__(self):
        if self.order < 0:
            raise ValueError("B-spline order must be >= 0")

    @property
    def half_support(self) -> float:
        return 0.5 * (self.order + 1)

    def __call__(self, x):
        return kernel_eval(self.order, x)

    def deriv(self, x):
        return kernel_deriv(self.order, x)


class _Local(NamedTuple):
    sign: np.ndarray | None
    inside: np.ndarray
    idx: np.ndarray
    w: np.ndarray
    dw: np.ndarray | None


@dataclass(frozen=True, eq=False)
class ShrinkageSpline:
    """Spline shrinkage function with constant extension outside its knots.

    Parameters
    ----------
    delta : float
        Knot spacing.
    m_half : int
        ``M``; knots sit at ``m * delta`` for ``m = -M..M``.
    coeffs : array
        ``2M+1`` values (general mode, ordered ``m = -M..M``) or ``M`` values
        ``c_1..c_M`` (antisymmetric mode).
    """

    delta: float
    m_half: int
    coeffs: np.ndarray
    mode: str = GENERAL
    kernel: BSplineKernel = field(default_factory=BSplineKernel)
    trained_sigma2: float | None = None
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=np.float64)
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)
        if isinstance(self.kernel, int):
            object.__setattr__(self, "kernel", BSplineKernel(self.kernel))
        if self.mode not in (GENERAL, ANTISYMMETRIC):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.m_half < 1 or self.m_half <= self.kernel.half_support:
            raise ValueError(
                f"m_half={self.m_half} leaves no knot range for an order-{self.kernel.order} kernel"
            )
        expected = self.n_coeffs_for(self.m_half, self.mode)
        if coeffs.shape != (expected,):
            raise ValueError(f"{self.mode} mode with M={self.m_half} needs {expected} coefficients")

    @staticmethod
    def n_coeffs_for(m_half: int, mode: str) -> int:
        return 2 * m_half + 1 if mode == GENERAL else m_half

    @classmethod
    def identity(cls, delta: float, m_half: int, mode: str = GENERAL, order: int = 3, **kw):
        """Spline with ``c_m = m * delta``, i.e. ``T(x) = x`` on the knot range."""
        if mode == GENERAL:
            c = np.arange(-m_half, m_half + 1) * delta
        else:
            c = np.arange(1, m_half + 1) * delta
        return cls(delta, m_half, c, mode, BSplineKernel(order), **kw)

    @classmethod
    def from_function(cls, f, delta: float, m_half: int, mode: str = GENERAL, order: int = 3, **kw):
        """Spline whose coefficients are samples ``f(m * delta)``."""
        m = np.arange(-m_half, m_half + 1) if mode == GENERAL else np.arange(1, m_half + 1)
        return cls(delta, m_half, np.asarray(f(m * delta), dtype=np.float64), mode, BSplineKernel(order), **kw)

    def with_coeffs(self, coeffs) -> "ShrinkageSpline":
        return ShrinkageSpline(
            self.delta, self.m_half, coeffs, self.mode, self.kernel,
            self.trained_sigma2, dict(self.training_meta),
        )

    @property
    def n_coeffs(self) -> int:
        return self.coeffs.size

    @property
    def t_max(self) -> float:
        """Half-width of the knot range in units of ``delta``."""
        return self.m_half - self.kernel.half_support

    @property
    def x_max(self) -> float:
        return self.t_max * self.delta

    @property
    def constrained(self) -> bool:
        return bool(self.training_meta.get("constrained", False))

    def full_coeffs(self) -> np.ndarray:
        """Coefficients ``c_{-M}..c_M`` (antisymmetric mode fills in ``c_0 = 0``)."""
        if self.mode == GENERAL:
            return np.array(self.coeffs)
        return np.concatenate([-self.coeffs[::-1], [0.0], self.coeffs])

    # -- evaluation -------------------------------------------------------

    def local_weights(self, x, deriv: bool = False) -> "_Local":
        """Nonzero basis weights at ``x``, shared by value, slope and ``Psi r``."""
        t = np.asarray(x, dtype=np.float64) / self.delta
        if self.mode == ANTISYMMETRIC:
            sign = np.sign(t)
            t = np.abs(t)
        else:
            sign = None
        inside = np.abs(t) <= self.t_max
        tc = np.clip(t, -self.t_max, self.t_max)
        n = self.kernel.order
        if n == 3:
            fl = np.floor(tc)
            f = (tc - fl)[..., None]
            g = 1.0 - f
            f2 = f * f
            w = np.concatenate(
                [g * g * g, 4.0 - 6.0 * f2 + 3.0 * f2 * f, 1.0 + 3.0 * (f + f2 - f2 * f), f2 * f],
                axis=-1,
            ) / 6.0
            dw = None
            if deriv:
                dw = np.concatenate(
                    [-g * g, 3.0 * f2 - 4.0 * f, 1.0 + 2.0 * f - 3.0 * f2, f2], axis=-1
                ) / 2.0
            m0 = fl - 1.0
        else:
            m0 = np.floor(tc - self.kernel.half_support) + 1.0
            s = tc[..., None] - (m0[..., None] + np.arange(n + 1))
            w = kernel_eval(n, s)
            dw = kernel_deriv(n, s) if deriv and n >= 1 else (np.zeros_like(s) if deriv else None)
        idx = (m0.astype(np.intp) + self.m_half)[..., None] + np.arange(n + 1)
        np.clip(idx, 0, 2 * self.m_half, out=idx)
        return _Local(sign, inside, idx, w, dw)

    def _value(self, loc: "_Local"):
        val = np.sum(self.full_coeffs()[loc.idx] * loc.w, axis=-1)
        return val if loc.sign is None else loc.sign * val

    def _slope(self, loc: "_Local"):
        d = np.sum(self.full_coeffs()[loc.idx] * loc.dw, axis=-1)
        return np.where(loc.inside, d / self.delta, 0.0)

    def __call__(self, x):
        val = self._value(self.local_weights(x))
        return val[()] if np.ndim(val) == 0 else val

    def deriv(self, x):
        """Analytic derivative; zero where the constant extension applies."""
        d = self._slope(self.local_weights(x, deriv=True))
        return d[()] if np.ndim(d) == 0 else d

    def basis_apply(self, v, r, groups=None, n_groups: int = 1, loc: "_Local | None" = None) -> np.ndarray:
        """``Psi @ r`` without forming ``Psi``: ``out[g, i] = sum_j psi_i(v_j) r_j``.

        ``groups`` (same shape as ``v``) assigns each sample to one of
        ``n_groups`` output rows; by default all samples land in row 0.
        The basis is evaluated at the clipped argument, which is the exact
        coefficient sensitivity of the constant extension.
        """
        if loc is None:
            loc = self.local_weights(v)
        r = np.asarray(r, dtype=np.float64)
        if loc.sign is not None:
            r = r * loc.sign
        w = loc.w * r[..., None]
        full = 2 * self.m_half + 1
        if groups is None:
            flat = loc.idx.ravel()
        else:
            flat = (np.asarray(groups, dtype=np.intp)[..., None] * full + loc.idx).ravel()
        acc = np.bincount(flat, weights=w.ravel(), minlength=n_groups * full)
        acc = acc.reshape(n_groups, full)
        if self.mode == GENERAL:
            return acc
        M = self.m_half
        return acc[:, M + 1:] - acc[:, M - 1::-1]

    def basis_matrix(self, v) -> np.ndarray:
        """Dense ``(n_coeffs, len(v))`` matrix with ``Psi.T @ c == T(v)``."""
        v = np.asarray(v, dtype=np.float64).ravel()
        cols = np.arange(v.size)
        out = self.basis_apply(v, np.ones_like(v), groups=cols, n_groups=v.size)
        return out.T.copy()

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "kernel_order": self.kernel.order,
            "delta": self.delta,
            "m_half": self.m_half,
            "mode": self.mode,
            "coeffs": self.coeffs.tolist(),
            "trained_sigma2": self.trained_sigma2,
            "training_meta": self.training_meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShrinkageSpline":
        return cls(
            float(d["delta"]), int(d["m_half"]), d["coeffs"], d.get("mode", GENERAL),
            BSplineKernel(int(d.get("kernel_order", 3))), d.get("trained_sigma2"),
            dict(d.get("training_meta") or {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ShrinkageSpline":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SoftThreshold:
    """Proximal map of ``tau * |.|``. ``tau`` may be an array that broadcasts."""

    tau: float | np.ndarray

    def __call__(self, x):
        return np.sign(x) * np.maximum(np.abs(x) - self.tau, 0.0)

    def deriv(self, x):
        return (np.abs(x) > self.tau).astype(np.float64)


class Identity:
    def __call__(self, x):
        return np.array(x, dtype=np.float64)

    def deriv(self, x):
        return np.ones_like(np.asarray(x, dtype=np.float64))


@dataclass
class FNEReport:
    ok: bool
    min_slope: float
    max_slope: float
    min_increment: float
    max_increment: float
    messages: list = field(default_factory=list)


def check_firmly_nonexpansive(spline: ShrinkageSpline, grid_points: int = 10_000,
                              tol: float = 1e-9) -> FNEReport:
    """Check ``0 <= c_m - c_{m-1} <= delta`` and ``0 <= T' <= 1`` on a grid."""
    if grid_points < 2:
        raise ValueError("grid_points must be >= 2")
    inc = np.diff(spline.full_coeffs())
    msgs = []
    if inc.min() < -tol:
        msgs.append(f"coefficient increment {inc.min():.3g} < 0 at m={int(inc.argmin()) - spline.m_half + 1}")
    if inc.max() > spline.delta + tol:
        msgs.append(
            f"coefficient increment {inc.max():.3g} > delta={spline.delta:.3g} "
            f"at m={int(inc.argmax()) - spline.m_half + 1}"
        )
    # a little past the knot range so the extension is exercised too
    x = np.linspace(-1.05 * spline.x_max, 1.05 * spline.x_max, grid_points)
    slopes = spline.deriv(x)
    if spline.kernel.order == 1:
        # piecewise linear: the increments already are the slopes
        slopes = np.concatenate([slopes, inc / spline.delta])
    lo, hi = float(slopes.min()), float(slopes.max())
    if lo < -tol:
        msgs.append(f"sampled slope {lo:.3g} < 0")
    if hi > 1 + tol:
        msgs.append(f"sampled slope {hi:.3g} > 1")
    return FNEReport(not msgs, lo, hi, float(inc.min()), float(inc.max()), msgs)


class ScaledShrinkage:
    """Pointwise evaluation of ``T_lam = (lam T^{-1} + (1 - lam) id)^{-1}``.

    For input ``y`` we solve ``lam v + (1 - lam) T(v) = y`` by bisection and
    return ``T(v)``. The left side is strictly increasing whenever
    ``0 <= T' <= 1`` and ``lam > 0``.
    """

    max_bisect = 200

    def __init__(self, base, lam: float, root_tol: float = 1e-10):
        if lam < 0:
            raise ValueError(f"lambda must be >= 0, got {lam!r}")
        if not root_tol > 0:
            raise ValueError("root_tol must be positive")
        self.base = base
        self.lam = float(lam)
        self.root_tol = float(root_tol)

    def _h(self, v):
        return self.lam * v + (1.0 - self.lam) * self.base(v)

    def preimage(self, y):
        """The ``v`` with ``h(v) = y`` to within ``root_tol``."""
        y = np.asarray(y, dtype=np.float64)
        lo = y - 1.0
        hi = y + 1.0
        step = np.ones_like(y)
        for _ in range(200):
            bad_lo = self._h(lo) > y
            bad_hi = self._h(hi) < y
            if not (bad_lo.any() or bad_hi.any()):
                break
            lo = np.where(bad_lo, lo - step, lo)
            hi = np.where(bad_hi, hi + step, hi)
            step = step * 2.0
        else:
            raise RuntimeError("bracket expansion failed; is the base operator firmly nonexpansive?")

        v = 0.5 * (lo + hi)
        done = np.zeros(y.shape, dtype=bool)
        for _ in range(self.max_bisect):
            mid = 0.5 * (lo + hi)
            g = self._h(mid) - y
            newly = ~done & (np.abs(g) <= self.root_tol)
            v = np.where(newly, mid, v)
            done |= newly
            if done.all():
                break
            above = g > 0
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
        else:
            # bracket collapsed to machine precision without meeting the tolerance
            v = np.where(done, v, 0.5 * (lo + hi))
        return v

    def __call__(self, y):
        if self.lam == 0.0:
            return np.array(y, dtype=np.float64)
        if self.lam == 1.0:
            out = self.base(np.asarray(y, dtype=np.float64))
            return out[()] if np.ndim(out) == 0 else out
        out = self.base(self.preimage(y))
        return out[()] if np.ndim(out) == 0 else out

    def deriv(self, y):
        if self.lam == 0.0:
            return np.ones_like(np.asarray(y, dtype=np.float64))
        v = np.asarray(y, dtype=np.float64) if self.lam == 1.0 else self.preimage(y)
        d = self.base.deriv(v)
        return d / (self.lam + (1.0 - self.lam) * d)


def scale_operator(spline, lam: float, y, root_tol: float = 1e-10):
    """``T_lam(y)``: the proximal map of ``lam * Phi`` when ``T = prox_Phi``."""
    return ScaledShrinkage(spline, lam, root_tol)(y)


@dataclass
class PenaltyCurve:
    """Convex penalty sampled along the graph of its proximal map.

    ``u_grid`` is non-decreasing; a repeated abscissa marks a kink, with the
    two ``phi_prime`` entries giving the ends of the subgradient interval.
    """

    u_grid: np.ndarray
    phi_values: np.ndarray
    phi_prime_values: np.ndarray

    def __call__(self, u):
        """Linear interpolation, extended linearly with the boundary slopes."""
        u = np.asarray(u, dtype=np.float64)
        ug, ph, dp = self.u_grid, self.phi_values, self.phi_prime_values
        out = np.interp(u, ug, ph)
        out = np.where(u < ug[0], ph[0] + dp[0] * (u - ug[0]), out)
        out = np.where(u > ug[-1], ph[-1] + dp[-1] * (u - ug[-1]), out)
        return out

    def slopes(self) -> np.ndarray:
        """Secant slopes between distinct consecutive samples."""
        du = np.diff(self.u_grid)
        keep = du > 0
        return np.diff(self.phi_values)[keep] / du[keep]

    def is_convex(self, tol: float = 1e-9) -> bool:
        s = self.slopes()
        scale = max(1.0, float(np.max(np.abs(s)))) if s.size else 1.0
        return bool(np.all(np.diff(s) >= -tol * scale))

    def symmetry_error(self) -> float:
        """``max |Phi(u) - Phi(-u)|`` over the sampled ``u`` inside the common range."""
        lim = min(-self.u_grid[0], self.u_grid[-1])
        u = self.u_grid[np.abs(self.u_grid) <= lim]
        if u.size == 0:
            return 0.0
        return float(np.max(np.abs(self(u) - self(-u))))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["u", "phi", "phi_prime"])
            for row in zip(self.u_grid, self.phi_values, self.phi_prime_values):
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "PenaltyCurve":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2])


def recover_penalty(shrink, v_grid, min_gap=1e-6) -> PenaltyCurve:
    """Recover ``Phi`` (up to a constant) from ``T = prox_Phi``.

    Along the graph ``u = T(v)`` the subgradient is ``Phi'(u) = v - u``;
    ``Phi`` is the trapezoidal integral of that curve, pinned to zero at the
    sample closest to ``u = 0``. Runs of equal ``u`` (flat parts of ``T``)
    are reduced to their first and last sample. Other samples closer than
    ``min_gap * max(1, range(u))`` to the last kept one are dropped, so that
    secant slopes are not swamped by rounding where ``T`` is nearly flat.
    """
    v = np.asarray(v_grid, dtype=np.float64)
    if v.ndim != 1 or v.size < 2 or np.any(np.diff(v) <= 0):
        raise ValueError("v_grid must be a strictly increasing 1-D array")
    u = np.asarray(shrink(v), dtype=np.float64)
    dphi = v - u
    steps = 0.5 * (dphi[1:] + dphi[:-1]) * np.diff(u)
    # Neumaier-compensated prefix sums
    phi = np.zeros(v.size)
    total = comp = 0.0
    for i, step in enumerate(steps.tolist(), start=1):
        t = total + step
        if abs(total) >= abs(step):
            comp += (total - t) + step
        else:
            comp += (step - t) + total
        total = t
        phi[i] = total + comp

    gap = min_gap * max(1.0, float(u[-1] - u[0]))
    anchor = int(np.argmin(np.abs(u)))

    def thin(order, sign):
        # walk outward from the anchor so symmetric curves thin symmetrically
        keep = [order[0]]
        for i in order[1:]:
            last = keep[-1]
            if u[i] == u[last]:
                if len(keep) > 1 and u[keep[-2]] == u[last]:
                    keep[-1] = i  # extend the flat run
                else:
                    keep.append(i)
            elif sign * (u[i] - u[last]) >= gap:
                keep.append(i)
        return keep

    left = thin(range(anchor, -1, -1), -1.0)
    right = thin(range(anchor, v.size), 1.0)
    idx = np.asarray(left[::-1] + right[1:])
    u, phi, dphi = u[idx], phi[idx], dphi[idx]

    phi = phi - phi[int(np.argmin(np.abs(u)))]
    return PenaltyCurve(u, phi, dphi)
