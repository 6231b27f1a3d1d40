"""Constrained momentum SGD over memories, class weights and beta.

Memories step along the tangent gradient and are renormalized. Class weights
take exponentiated-gradient steps followed by Sinkhorn scaling, at a rate
divided by (1 + p_h(0) / (1 - p_h(0))) * P so that the step acts on
g = (P + P0) p with the same learning rate as the memories.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DimensionMismatch, DomainError, NotConverged, NumericFailure
from .model import (
    DamModel,
    LabeledDataset,
    classify,
    effective_gradients,
    effective_loss,
    nll_loss,
    one_nn_fidelity,
    unsupervised_targets,
)
from .numerics import make_rng, normalize_to_sphere, sample_uniform_sphere
from .polytope import TransportMatrix, class_gradient_projection, multiplicative_step

BETA_FLOOR = 1e-3


@dataclass
class TrainConfig:
    n_hidden: int = 100
    learn_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 100
    epochs: int = 10
    beta: float = 10.0
    train_beta: bool = False
    beta_rate: Optional[float] = None  # defaults to learn_rate
    varsigma: float = 1.0
    seed: int = 0
    p0: float = 1.0
    n_classes: Optional[int] = None  # needed only for unsupervised runs
    min_improvement: float = 0.0  # early stop on epoch-loss improvement; 0 disables
    sinkhorn_tol: float = 1e-10

    def validate(self) -> None:
        if not self.learn_rate >= 0:
            raise DomainError("learn_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise DomainError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.n_hidden < 1:
            raise DomainError("batch_size and n_hidden must be positive, epochs non-negative")
        if self.beta <= 0 or self.varsigma <= 0 or self.p0 <= 0:
            raise DomainError("beta, varsigma and p0 must be positive")


@dataclass
class OptimizerState:
    memories: np.ndarray
    class_weights: np.ndarray
    beta: float = 0.0

    @classmethod
    def zeros_like(cls, model: DamModel) -> "OptimizerState":
        return cls(np.zeros_like(model.memories), np.zeros_like(model.class_weights.entries), 0.0)

    def check(self, model: DamModel) -> None:
        if self.memories.shape != model.memories.shape or self.class_weights.shape != model.class_weights.shape:
            raise DimensionMismatch("optimizer buffers do not match the model")


@dataclass
class EpochMetrics:
    loss: float
    accuracy: float
    beta: float
    sinkhorn_failures: int = 0
    seconds: float = 0.0


@dataclass
class EvalMetrics:
    accuracy: float
    effective_loss: float
    nll: float
    fidelity: tuple


@dataclass
class History:
    epochs: list = field(default_factory=list)

    @property
    def losses(self) -> list:
        return [e.loss for e in self.epochs]

    @property
    def accuracies(self) -> list:
        return [e.accuracy for e in self.epochs]


def grad_memories(model: DamModel, batch: LabeledDataset) -> np.ndarray:
    """Tangent gradient of the effective loss with respect to each memory."""
    return effective_gradients(model, batch).memories


def grad_class_weights(model: DamModel, batch: LabeledDataset) -> np.ndarray:
    """Gradient of the effective loss with respect to the class-weight entries."""
    return effective_gradients(model, batch).class_weights


def grad_beta(model: DamModel, batch: LabeledDataset) -> float:
    return effective_gradients(model, batch).beta


def class_rate_divisor(model: DamModel) -> float:
    """(1 + p_h(0) / (1 - p_h(0))) * P, the factor between g and p."""
    h0 = model.class_weights.row_marginals[0]
    return (1.0 + h0 / (1.0 - h0)) * model.n_hidden


def initial_class_weights(n_hidden: int, class_marginal: np.ndarray, p0: float = 1.0) -> TransportMatrix:
    """Outer-product class weights with null mass P0 / (P + P0) and uniform hidden units."""
    q = np.asarray(class_marginal, dtype=float)
    q = q / q.sum()
    h = np.full(n_hidden + 1, 1.0 / (n_hidden + p0))
    h[0] = p0 / (n_hidden + p0)
    return TransportMatrix(np.outer(h, q), h, q)


def decreasing_class_marginal(n_classes: int) -> np.ndarray:
    """Ramp (C + 1 - y) / sum over y = 0..C, used when no labels break the symmetry."""
    ramp = np.arange(n_classes + 1, 0, -1, dtype=float)
    return ramp / ramp.sum()


def init_model(
    n_hidden: int,
    n_dim: int,
    class_marginal: np.ndarray,
    rng: np.random.Generator,
    beta: float = 10.0,
    varsigma: float = 1.0,
    p0: float = 1.0,
) -> DamModel:
    """Random memories on the sphere with outer-product class weights."""
    memories = sample_uniform_sphere(n_dim, rng, size=n_hidden)
    return DamModel(memories, initial_class_weights(n_hidden, class_marginal, p0), float(beta), float(varsigma))


LabelFn = Callable[[DamModel, np.ndarray], np.ndarray]


def sgd_epoch(
    model: DamModel,
    data: LabeledDataset,
    cfg: TrainConfig,
    opt: OptimizerState,
    rng: np.random.Generator,
    label_fn: Optional[LabelFn] = None,
) -> EpochMetrics:
    """One shuffled pass of constrained momentum SGD, updating model and opt in place.

    Args:
        label_fn: optional callable producing the batch targets from the current
            model; when given, the dataset's own soft labels are ignored.

    Returns:
        Mean batch loss and accuracy, both measured before each update.
    """
    opt.check(model)
    start = time.perf_counter()
    m = len(data)
    order = rng.permutation(m)
    loss_sum = 0.0
    correct = 0
    failures = 0
    beta_rate = cfg.learn_rate if cfg.beta_rate is None else cfg.beta_rate
    for lo in range(0, m, cfg.batch_size):
        idx = order[lo : lo + cfg.batch_size]
        inputs = data.inputs[idx]
        labels = data.soft_labels[idx] if label_fn is None else label_fn(model, inputs)
        batch = LabeledDataset(inputs, labels)
        grads = effective_gradients(model, batch)
        loss_sum += grads.loss * len(idx)
        if label_fn is None:
            correct += int(np.sum(np.argmax(grads.log_joint, axis=1) == np.argmax(labels, axis=1)))
        if cfg.learn_rate == 0.0:
            continue

        opt.memories = cfg.momentum * opt.memories + grads.memories
        new_memories = normalize_to_sphere(model.memories - cfg.learn_rate * opt.memories)

        projected = class_gradient_projection(grads.class_weights, model.class_weights)
        opt.class_weights = cfg.momentum * opt.class_weights + projected
        rate = cfg.learn_rate / class_rate_divisor(model)
        try:
            new_weights, _ = multiplicative_step(model.class_weights, -opt.class_weights, rate, tol=cfg.sinkhorn_tol)
        except NotConverged:
            failures += 1
            new_weights = model.class_weights

        model.memories = new_memories
        model.class_weights = new_weights
        if cfg.train_beta:
            opt.beta = cfg.momentum * opt.beta + grads.beta
            model.beta = max(model.beta - beta_rate * opt.beta, BETA_FLOOR)
        if not (np.all(np.isfinite(model.memories)) and np.all(np.isfinite(model.class_weights.entries))):
            raise NumericFailure("parameters became non-finite")
    accuracy = correct / m if label_fn is None else float("nan")
    return EpochMetrics(loss_sum / m, accuracy, float(model.beta), failures, time.perf_counter() - start)


def run_epochs(
    model: DamModel,
    data: LabeledDataset,
    cfg: TrainConfig,
    opt: OptimizerState,
    rng: np.random.Generator,
    epochs: int,
    history: History,
    label_fn: Optional[LabelFn] = None,
) -> None:
    """Run up to `epochs` epochs, stopping early when the loss stops improving."""
    previous = np.inf
    for _ in range(epochs):
        metrics = sgd_epoch(model, data, cfg, opt, rng, label_fn)
        history.epochs.append(metrics)
        if not np.isfinite(metrics.loss):
            raise NumericFailure("epoch loss is not finite")
        if cfg.min_improvement > 0 and previous - metrics.loss < cfg.min_improvement:
            break
        previous = metrics.loss


def class_proportions(data: LabeledDataset) -> np.ndarray:
    return data.soft_labels.mean(axis=0)


def train_supervised(
    data: LabeledDataset,
    cfg: TrainConfig,
    init: Optional[DamModel] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[DamModel, History]:
    """Train on labeled data; a fresh model is drawn from rng unless init is given."""
    cfg.validate()
    rng = make_rng(cfg.seed) if rng is None else rng
    if init is None:
        model = init_model(
            cfg.n_hidden, data.inputs.shape[1], class_proportions(data), rng, cfg.beta, cfg.varsigma, cfg.p0
        )
    else:
        model = init.copy()
    history = History()
    run_epochs(model, data, cfg, OptimizerState.zeros_like(model), rng, cfg.epochs, history)
    return model, history


def train_unsupervised(
    patterns,
    cfg: TrainConfig,
    eps: float,
    rng: Optional[np.random.Generator] = None,
    init: Optional[DamModel] = None,
) -> tuple[DamModel, History]:
    """Self-labeled training with targets (1 - eps) * posterior + eps / (C + 1).

    The posterior is recomputed from the current model for every batch and
    then treated as a constant label.
    """
    cfg.validate()
    if not 0.0 <= eps <= 1.0:
        raise DomainError("eps must lie in [0, 1]")
    inputs = patterns.inputs if isinstance(patterns, LabeledDataset) else np.asarray(patterns, dtype=float)
    rng = make_rng(cfg.seed) if rng is None else rng
    if init is None:
        if cfg.n_classes is None:
            raise DomainError("unsupervised training needs cfg.n_classes")
        model = init_model(
            cfg.n_hidden,
            inputs.shape[1],
            decreasing_class_marginal(cfg.n_classes),
            rng,
            cfg.beta,
            cfg.varsigma,
            cfg.p0,
        )
    else:
        model = init.copy()
    n_slots = model.n_classes + 1
    data = LabeledDataset(inputs, np.full((len(inputs), n_slots), 1.0 / n_slots))
    history = History()

    def label_fn(current: DamModel, x: np.ndarray) -> np.ndarray:
        return unsupervised_targets(current, x, eps)

    run_epochs(model, data, cfg, OptimizerState.zeros_like(model), rng, cfg.epochs, history, label_fn)
    return model, history


def evaluate(model: DamModel, data: LabeledDataset) -> EvalMetrics:
    """Accuracy from the effective predictions, both losses and the 1-NN fidelity triple."""
    preds = classify(model, data.inputs)
    return EvalMetrics(
        accuracy=float(np.mean(preds == data.hard_labels)),
        effective_loss=effective_loss(model, data),
        nll=nll_loss(model, data),
        fidelity=one_nn_fidelity(model, data),
    )
