"""Dense associative memory as a mixture of von Mises-Fisher components.

The joint density of a unit input x and class y is

    P(x, y) = sum_mu p[mu, y] exp(s*beta * w_mu . x) / Omega(beta) + p[0, y] / Omega(0)

where the first row of the class weights p belongs to a null slot with a flat
density, s is the effective-loss factor (s = 1 gives the exact likelihood) and
Omega is the vMF normalizer. Memory mu (row mu of `memories`) owns row mu + 1
of the class weights; column 0 is the null class.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .errors import AllZeroColumn, DimensionMismatch, DomainError, EmptyBatch, NonFiniteInput
from .numerics import dlog_vmf_norm_dr, log_vmf_norm, tangent_project
from .polytope import MARGINAL_ATOL, TransportMatrix


@dataclass
class DamModel:
    memories: np.ndarray
    class_weights: TransportMatrix
    beta: float
    varsigma: float = 1.0

    def __post_init__(self) -> None:
        self.memories = np.asarray(self.memories, dtype=float)
        if self.memories.ndim != 2:
            raise DimensionMismatch("memories must be a P x N matrix")
        if self.class_weights.shape[0] != self.memories.shape[0] + 1:
            raise DimensionMismatch("class weights need one row per memory plus the null row")

    @property
    def n_hidden(self) -> int:
        return self.memories.shape[0]

    @property
    def n_dim(self) -> int:
        return self.memories.shape[1]

    @property
    def n_classes(self) -> int:
        """Number of real classes C (the null class is not counted)."""
        return self.class_weights.shape[1] - 1

    @property
    def beta_eff(self) -> float:
        return self.varsigma * self.beta

    def copy(self) -> "DamModel":
        return DamModel(self.memories.copy(), self.class_weights.copy(), float(self.beta), float(self.varsigma))

    def check(self, atol: float = 1e-8) -> None:
        """Raise if the memories leave the sphere or the class weights leave the polytope."""
        norms = np.linalg.norm(self.memories, axis=1)
        if not np.all(np.isfinite(self.memories)) or np.max(np.abs(norms - 1.0)) > atol:
            raise NonFiniteInput("memories must be finite unit vectors")
        if not self.class_weights.is_feasible(MARGINAL_ATOL):
            raise NonFiniteInput("class weights left the transport polytope")


@dataclass
class LabeledDataset:
    """Unit-norm inputs with soft labels over the C + 1 classes (null first)."""

    inputs: np.ndarray
    soft_labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.soft_labels = np.asarray(self.soft_labels, dtype=float)
        if self.inputs.ndim != 2 or self.soft_labels.ndim != 2 or len(self.inputs) != len(self.soft_labels):
            raise DimensionMismatch("inputs and soft labels must be matrices with matching rows")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def hard_labels(self) -> np.ndarray:
        return np.argmax(self.soft_labels, axis=1)

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(self.inputs[index], self.soft_labels[index], dict(self.meta))


@dataclass
class _Mixture:
    """Shifted mixture terms shared by the loss, gradients and posteriors.

    exp_terms[m, mu] * p[mu + 1, y] and exp_null[m] * p[0, y] are the slot
    contributions to P(x_m, y) after multiplication by exp(shift[m] - log Omega(beta)).
    """

    overlaps: np.ndarray
    exp_terms: np.ndarray
    exp_null: np.ndarray
    shift: np.ndarray
    joint: np.ndarray  # shifted sum over slots, shape (M, C+1)
    log_joint: np.ndarray  # log P(x_m, y)
    log_norm_beta: float


def _mixture(model: DamModel, inputs: np.ndarray, varsigma: Optional[float] = None) -> _Mixture:
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.shape[1] != model.n_dim:
        raise DimensionMismatch(f"input dimension {inputs.shape[1]} != {model.n_dim}")
    if len(inputs) == 0:
        raise EmptyBatch("empty batch")
    s = model.varsigma if varsigma is None else varsigma
    beta = float(model.beta)
    n = model.n_dim
    log_norm_beta = log_vmf_norm(n, beta)
    null_logit = log_norm_beta - log_vmf_norm(n, 0.0)
    overlaps = inputs @ model.memories.T
    scaled = (s * beta) * overlaps
    top = scaled.max(axis=1) if model.n_hidden else np.full(len(inputs), -np.inf)
    shift = np.maximum(top, null_logit)
    exp_terms = np.exp(scaled - shift[:, None])
    exp_null = np.exp(null_logit - shift)
    p = model.class_weights.entries
    joint = exp_terms @ p[1:] + exp_null[:, None] * p[0][None, :]
    with np.errstate(divide="ignore"):
        log_joint = np.log(joint) + (shift - log_norm_beta)[:, None]
    # Rows where every weighted slot underflowed: redo them slot by slot.
    bad_rows = np.nonzero(np.any((joint == 0) & (p.sum(axis=0) > 0)[None, :], axis=1))[0]
    if bad_rows.size:
        with np.errstate(divide="ignore"):
            log_p = np.log(p)
        slot_logits = np.concatenate([np.full((bad_rows.size, 1), null_logit), scaled[bad_rows]], axis=1)
        log_joint[bad_rows] = (
            logsumexp(slot_logits[:, :, None] + log_p[None, :, :], axis=1) - log_norm_beta
        )
    return _Mixture(overlaps, exp_terms, exp_null, shift, joint, log_joint, log_norm_beta)


def log_joint(model: DamModel, inputs: np.ndarray, varsigma: Optional[float] = None, classes=None) -> np.ndarray:
    """log P(x, y) for a batch of inputs.

    Args:
        classes: optional class index or indices to keep; requesting a class
            whose column of the class weights is all zero raises AllZeroColumn.

    Returns:
        Shape (M, C+1), or (M, len(classes)) / (M,) when classes is given.
        Unselected all-zero columns hold -inf.
    """
    if classes is not None:
        cols = np.atleast_1d(np.asarray(classes, dtype=int))
        if np.any(cols < 0) or np.any(cols > model.n_classes):
            raise DomainError("class index out of range")
        if np.any(model.class_weights.entries[:, cols].sum(axis=0) == 0):
            raise AllZeroColumn("requested class has no weight in any slot")
    out = _mixture(model, inputs, varsigma).log_joint
    return out if classes is None else out[:, classes]


def _check_label_support(model: DamModel, labels: np.ndarray) -> None:
    empty = model.class_weights.entries.sum(axis=0) == 0
    if np.any(labels[:, empty] > 0):
        raise AllZeroColumn("label mass on a class with no weight in any slot")


def _weighted_neg_log(labels: np.ndarray, log_p: np.ndarray) -> float:
    mask = labels > 0
    return float(-np.sum(labels[mask] * log_p[mask]) / labels.shape[0])


def _check_labels(model: DamModel, batch: LabeledDataset) -> None:
    if batch.soft_labels.shape[1] != model.n_classes + 1:
        raise DimensionMismatch("soft labels must cover the null class and C real classes")
    if len(batch) == 0:
        raise EmptyBatch("empty batch")


def nll_loss(model: DamModel, batch: LabeledDataset) -> float:
    """Mean negative log-likelihood of the labeled batch under the exact mixture."""
    _check_labels(model, batch)
    _check_label_support(model, batch.soft_labels)
    return _weighted_neg_log(batch.soft_labels, log_joint(model, batch.inputs, varsigma=1.0))


def effective_loss(model: DamModel, batch: LabeledDataset) -> float:
    """Like nll_loss but with the overlap term damped by model.varsigma."""
    _check_labels(model, batch)
    _check_label_support(model, batch.soft_labels)
    return _weighted_neg_log(batch.soft_labels, log_joint(model, batch.inputs))


@dataclass
class Gradients:
    memories: np.ndarray  # tangent to the sphere at each memory
    class_weights: np.ndarray  # d loss / d p, full matrix
    beta: float
    loss: float
    responsibilities: np.ndarray  # label-weighted posterior over memories, (M, P)
    log_joint: np.ndarray


def effective_gradients(model: DamModel, batch: LabeledDataset) -> Gradients:
    """Loss value and gradients of the effective loss with respect to all parameters."""
    _check_labels(model, batch)
    mix = _mixture(model, batch.inputs)
    q = batch.soft_labels
    m = len(batch)
    p = model.class_weights.entries
    ratio = np.zeros_like(q)
    np.divide(q, mix.joint, out=ratio, where=(q > 0) & (mix.joint > 0))
    # posterior weight of memory mu given (x, y), summed against the labels
    resp = mix.exp_terms * (ratio @ p[1:].T)
    s = model.varsigma
    beta = model.beta
    grad_w = -(s * beta / m) * (resp.T @ batch.inputs)
    grad_w = tangent_project(grad_w, model.memories)
    slot_mass = np.concatenate([mix.exp_null[:, None], mix.exp_terms], axis=1)
    grad_p = np.where(p > 0, -(slot_mass.T @ ratio) / m, 0.0)
    dlog = dlog_vmf_norm_dr(model.n_dim, beta)
    grad_beta = -float(np.sum(resp * (s * mix.overlaps - dlog))) / m
    return Gradients(
        memories=grad_w,
        class_weights=grad_p,
        beta=grad_beta,
        loss=_weighted_neg_log(q, mix.log_joint),
        responsibilities=resp,
        log_joint=mix.log_joint,
    )


def posterior_over_classes(model: DamModel, inputs: np.ndarray) -> np.ndarray:
    """P(y | x) under the effective mixture, shape (M, C+1) or (C+1,) for one input."""
    single = np.asarray(inputs).ndim == 1
    if not np.any(model.class_weights.entries > 0):
        raise AllZeroColumn("every class column is zero")
    lj = log_joint(model, inputs)
    top = np.max(lj, axis=1, keepdims=True)
    post = np.exp(lj - top)
    post /= post.sum(axis=1, keepdims=True)
    return post[0] if single else post


def classify(model: DamModel, inputs: np.ndarray):
    """Most probable class; exact ties go to the smallest index."""
    return np.argmax(posterior_over_classes(model, inputs), axis=-1)


def margin_loss(model: DamModel, inputs: np.ndarray) -> float:
    """Mean negative log marginal density -log sum_y P(x, y)."""
    lj = log_joint(model, inputs)
    return float(-np.mean(logsumexp(lj, axis=1)))


def cond_entropy_loss(model: DamModel, inputs: np.ndarray) -> float:
    """Mean entropy of the class posterior."""
    post = posterior_over_classes(model, np.atleast_2d(inputs))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(post > 0, post * np.log(post), 0.0)
    return float(-np.mean(terms.sum(axis=1)))


def unsupervised_targets(model: DamModel, inputs: np.ndarray, eps: float) -> np.ndarray:
    """Self-labels (1 - eps) * posterior + eps / (C + 1), with the posterior held fixed."""
    if not 0.0 <= eps <= 1.0:
        raise DomainError("eps must lie in [0, 1]")
    post = posterior_over_classes(model, np.atleast_2d(inputs))
    return (1.0 - eps) * post + eps / post.shape[1]


def unsupervised_loss(model: DamModel, inputs: np.ndarray, eps: float) -> float:
    """Effective loss against self-labels; equals margin + conditional entropy at eps = 0."""
    inputs = np.atleast_2d(inputs)
    targets = unsupervised_targets(model, inputs, eps)
    return _weighted_neg_log(targets, log_joint(model, inputs))


def nearest_memory(model: DamModel, x: np.ndarray) -> int:
    """Row index of the memory with the largest overlap with x (0-based)."""
    return int(np.argmax(model.memories @ np.asarray(x, dtype=float)))


def one_nn_fidelity(model: DamModel, data: LabeledDataset) -> tuple[float, float, float]:
    """Agreement between the classifier and the class of the nearest memory.

    Returns:
        Fractions (overall, on correctly classified, on misclassified inputs);
        an empty subset gives NaN.
    """
    preds = classify(model, data.inputs)
    nearest = np.argmax(data.inputs @ model.memories.T, axis=1)
    memory_class = np.argmax(model.class_weights.entries[1:], axis=1)
    agree = preds == memory_class[nearest]
    correct = preds == data.hard_labels

    def frac(mask):
        return float(np.mean(agree[mask])) if np.any(mask) else float("nan")

    return frac(np.ones_like(agree)), frac(correct), frac(~correct)
