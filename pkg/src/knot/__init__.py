"""Optimal-transport ensemble distillation over semantic label spaces."""
from ._kernels import BACKEND
from .confidence import ProbabilityBias, WeightScheme, estimate_bias, weight
from .divergences import (
    DualPotentials,
    SinkhornConfig,
    kl_divergence,
    kl_grad_student,
    sinkhorn_distance,
    sinkhorn_grad_student,
    sinkhorn_potentials,
    w1_exact_1d,
)
from .distillation import Teacher, TeacherEnsemble, augment_with_lwf, distill, ensemble_grad, ensemble_loss
from .label_space import LabelSpace, build_space, builtin_space
from .metrics import EvalReport, accuracy, macro_f1, semantic_distance
from .model import LinearSoftmaxClassifier, OptimizerConfig, train_ce
from .prob import Distribution, LogitVector, clamp_simplex, expectation_in_space, softmax

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Distribution",
    "DualPotentials",
    "EvalReport",
    "LabelSpace",
    "LinearSoftmaxClassifier",
    "LogitVector",
    "OptimizerConfig",
    "ProbabilityBias",
    "SinkhornConfig",
    "Teacher",
    "TeacherEnsemble",
    "WeightScheme",
    "accuracy",
    "augment_with_lwf",
    "build_space",
    "builtin_space",
    "clamp_simplex",
    "distill",
    "ensemble_grad",
    "ensemble_loss",
    "estimate_bias",
    "expectation_in_space",
    "kl_divergence",
    "kl_grad_student",
    "macro_f1",
    "semantic_distance",
    "sinkhorn_distance",
    "sinkhorn_grad_student",
    "sinkhorn_potentials",
    "softmax",
    "train_ce",
    "w1_exact_1d",
    "weight",
]
