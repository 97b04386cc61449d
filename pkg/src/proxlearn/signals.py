"""Lévy-process test signals, additive white Gaussian noise and the
finite-difference whitening operator.

Signals are stored column-wise when batched: an array of shape ``(N, B)``
holds ``B`` signals of length ``N``. ``apply_L`` and ``apply_Lt`` act along
axis 0, so they accept either a single vector or such a batch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

__all__ = [
    "ModelKind",
    "LevyModel",
    "SignalBatch",
    "DifferenceOperator",
    "generate",
    "add_awgn",
    "make_batch",
    "apply_L",
    "apply_Lt",
]


class ModelKind(str, Enum):
    BROWNIAN = "brownian"
    COMPOUND_POISSON = "compound-poisson"


@dataclass(frozen=True)
class LevyModel:
    """Increment law of a Lévy process sampled on the integers.

    ``poisson_rate`` is the jump rate of the compound Poisson process; an
    increment is exactly zero with probability ``exp(-poisson_rate)``.
    """

    kind: ModelKind = ModelKind.BROWNIAN
    poisson_rate: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.kind is ModelKind.COMPOUND_POISSON:
            if self.poisson_rate is None or not self.poisson_rate > 0:
                raise ValueError(
                    f"compound Poisson model needs poisson_rate > 0, got {self.poisson_rate!r}"
                )

    @classmethod
    def brownian(cls) -> "LevyModel":
        return cls(ModelKind.BROWNIAN)

    @classmethod
    def compound_poisson(cls, rate: float = 0.6) -> "LevyModel":
        return cls(ModelKind.COMPOUND_POISSON, float(rate))

    @property
    def zero_probability(self) -> float:
        """Mass of the atom at zero in the increment distribution."""
        if self.kind is ModelKind.COMPOUND_POISSON:
            return math.exp(-self.poisson_rate)
        return 0.0

    def sample_increments(self, rng: np.random.Generator, size) -> np.ndarray:
        u = rng.standard_normal(size)
        if self.kind is ModelKind.COMPOUND_POISSON:
            u[rng.random(size) < self.zero_probability] = 0.0
        return u

    def to_dict(self) -> dict:
        d = {"model": self.kind.value}
        if self.kind is ModelKind.COMPOUND_POISSON:
            d["lambda"] = self.poisson_rate
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LevyModel":
        return cls(ModelKind(d["model"]), d.get("lambda"))


def _child_rngs(seed: int, count: int) -> list[np.random.Generator]:
    # one stream per signal, so results do not depend on how work is split
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.default_rng(s) for s in children]


def generate(model: LevyModel, n: int, count: int, seed: int) -> np.ndarray:
    """Draw ``count`` signals of length ``n``; returns an ``(n, count)`` array.

    Each signal is the cumulative sum of i.i.d. increments, starting from an
    implicit ``x_0 = 0``.
    """
    if n < 1 or count < 1:
        raise ValueError("n and count must be >= 1")
    out = np.empty((n, count))
    for j, rng in enumerate(_child_rngs(seed, count)):
        out[:, j] = np.cumsum(model.sample_increments(rng, n))
    return out


@dataclass
class SignalBatch:
    clean: np.ndarray
    noisy: np.ndarray
    noise_variance: float
    model: LevyModel | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.clean = np.atleast_2d(np.asarray(self.clean, dtype=np.float64).T).T
        self.noisy = np.atleast_2d(np.asarray(self.noisy, dtype=np.float64).T).T
        if self.clean.shape != self.noisy.shape:
            raise ValueError(
                f"clean and noisy shapes differ: {self.clean.shape} vs {self.noisy.shape}"
            )
        if not self.noise_variance > 0:
            raise ValueError("noise_variance must be positive")

    @property
    def n(self) -> int:
        return self.clean.shape[0]

    @property
    def count(self) -> int:
        return self.clean.shape[1]

    @property
    def sigma(self) -> float:
        return math.sqrt(self.noise_variance)

    def __len__(self) -> int:
        return self.count

    def subset(self, index) -> "SignalBatch":
        return SignalBatch(
            self.clean[:, index], self.noisy[:, index], self.noise_variance, self.model, self.seed
        )

    def to_dict(self) -> dict:
        d = dict(self.model.to_dict()) if self.model is not None else {"model": None}
        d.update(
            n=self.n,
            sigma2=self.noise_variance,
            seed=self.seed,
            clean=self.clean.T.tolist(),
            noisy=self.noisy.T.tolist(),
        )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SignalBatch":
        model = LevyModel.from_dict(d) if d.get("model") else None
        clean = np.asarray(d["clean"], dtype=np.float64).T
        noisy = np.asarray(d["noisy"], dtype=np.float64).T
        if "n" in d and clean.shape[0] != d["n"]:
            raise ValueError(f"declared n={d['n']} but signals have length {clean.shape[0]}")
        return cls(clean, noisy, float(d["sigma2"]), model, d.get("seed"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SignalBatch":
        return cls.from_dict(json.loads(Path(path).read_text()))


def add_awgn(clean, sigma2: float, seed: int, model: LevyModel | None = None) -> SignalBatch:
    """Corrupt each column of ``clean`` with i.i.d. N(0, sigma2) noise."""
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2!r}")
    clean = np.asarray(clean, dtype=np.float64)
    batch2d = np.atleast_2d(clean.T).T
    sigma = math.sqrt(sigma2)
    noisy = np.empty_like(batch2d)
    for j, rng in enumerate(_child_rngs(seed, batch2d.shape[1])):
        noisy[:, j] = batch2d[:, j] + sigma * rng.standard_normal(batch2d.shape[0])
    return SignalBatch(batch2d, noisy, float(sigma2), model, seed)


def make_batch(model: LevyModel, n: int, count: int, sigma2: float, seed: int) -> SignalBatch:
    """Generate clean signals and their noisy versions from a single seed."""
    s_clean, s_noise = np.random.SeedSequence(seed).generate_state(2)
    clean = generate(model, n, count, int(s_clean))
    batch = add_awgn(clean, sigma2, int(s_noise), model)
    batch.seed = seed
    return batch


def apply_L(x: np.ndarray) -> np.ndarray:
    """First differences ``[Lx]_i = x_i - x_{i-1}`` with ``x_0 = 0``."""
    x = np.asarray(x, dtype=np.float64)
    u = x.copy()
    u[1:] -= x[:-1]
    return u


def apply_Lt(u: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`apply_L`: ``[L^T u]_i = u_i - u_{i+1}`` with ``u_{N+1} = 0``."""
    u = np.asarray(u, dtype=np.float64)
    x = u.copy()
    x[:-1] -= u[1:]
    return x


@dataclass(frozen=True)
class DifferenceOperator:
    """Square lower-bidiagonal finite-difference matrix of size ``n``."""

    n: int

    def __matmul__(self, x):
        return apply_L(x)

    @property
    def T(self) -> "_AdjointDifference":
        return _AdjointDifference(self.n)

    def dense(self) -> np.ndarray:
        return np.eye(self.n) - np.eye(self.n, k=-1)

    def inverse(self, u):
        return np.cumsum(u, axis=0)


@dataclass(frozen=True)
class _AdjointDifference:
    n: int

    def __matmul__(self, u):
        return apply_Lt(u)
