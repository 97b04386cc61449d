"""Learned proximal operators for Lévy-process denoising.

A pointwise shrinkage, parameterized as a B-spline, is trained by
backpropagation through a fixed number of ADMM iterations. Constraining its
coefficients keeps it firmly nonexpansive, which makes it the proximal map
of a convex penalty.
"""

from .admm import AdmmConfig, admm_run, cost_eval, factorize
from .baselines import IncrementDensity, lmmse_denoise, mmse_smoother, tv_denoise, tv_oracle_lambda
from .learning import (
    CONSTRAINED,
    UNCONSTRAINED,
    ConstraintSet,
    TrainConfig,
    backprop_gradient,
    batch_gradient,
    project_to_S,
    train,
)
from .signals import LevyModel, SignalBatch, add_awgn, generate, make_batch
from .splines import (
    ANTISYMMETRIC,
    GENERAL,
    BSplineKernel,
    PenaltyCurve,
    ScaledShrinkage,
    ShrinkageSpline,
    SoftThreshold,
    check_firmly_nonexpansive,
    recover_penalty,
    scale_operator,
)

__version__ = "0.1.0"

__all__ = [
    "AdmmConfig", "admm_run", "cost_eval", "factorize",
    "IncrementDensity", "lmmse_denoise", "mmse_smoother", "tv_denoise", "tv_oracle_lambda",
    "CONSTRAINED", "UNCONSTRAINED", "ConstraintSet", "TrainConfig", "backprop_gradient",
    "batch_gradient", "project_to_S", "train",
    "LevyModel", "SignalBatch", "add_awgn", "generate", "make_batch",
    "ANTISYMMETRIC", "GENERAL", "BSplineKernel", "PenaltyCurve", "ScaledShrinkage",
    "ShrinkageSpline", "SoftThreshold", "check_firmly_nonexpansive", "recover_penalty",
    "scale_operator",
]
