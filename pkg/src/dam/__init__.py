"""Dense associative memory as a von Mises-Fisher mixture with Potts hidden and class units."""

from .dataio import (
    TeacherSpec,
    extract_patches,
    generate_teacher_student,
    load_checkpoint,
    load_idx,
    load_mnist,
    normalize_dataset,
    save_checkpoint,
)
from .model import DamModel, LabeledDataset, classify, effective_loss, nll_loss, posterior_over_classes
from .polytope import TransportMatrix, lagrange_normalize, multiplicative_step, sinkhorn_scale
from .splitting import SplitConfig, splitting_descent
from .training import TrainConfig, evaluate, train_supervised, train_unsupervised

__all__ = [
    "DamModel",
    "LabeledDataset",
    "SplitConfig",
    "TeacherSpec",
    "TrainConfig",
    "TransportMatrix",
    "classify",
    "effective_loss",
    "evaluate",
    "extract_patches",
    "generate_teacher_student",
    "lagrange_normalize",
    "load_checkpoint",
    "load_idx",
    "load_mnist",
    "multiplicative_step",
    "nll_loss",
    "normalize_dataset",
    "posterior_over_classes",
    "save_checkpoint",
    "sinkhorn_scale",
    "splitting_descent",
    "train_supervised",
    "train_unsupervised",
]
