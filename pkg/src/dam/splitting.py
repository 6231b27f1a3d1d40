"""Growing a model by splitting memories along negative-curvature directions.

For memory mu with direction theta, the curvature of the effective loss when
the memory is split into two copies displaced by +/- delta*u is u^T S_mu u with

    u^T S_mu u = -mean_x[ r_mu(x) * F(u; theta, x) ]
    F(u; theta, x) = b^2 (u.x - (u.theta)(theta.x))^2 + b (theta.x)((u.theta)^2 - 1)

where b = varsigma * beta and r_mu(x) is the label-weighted responsibility of
memory mu. A negative minimum over tangent u means splitting lowers the loss.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError, InvalidSplit
from .model import DamModel, LabeledDataset, effective_gradients, effective_loss
from .numerics import make_rng, normalize_to_sphere, sample_uniform_sphere
from .polytope import TransportMatrix, sinkhorn_scale
from .training import History, OptimizerState, TrainConfig, class_proportions, init_model, run_epochs


@dataclass
class SplitConfig:
    p_init: int = 1
    p_max: int = 8
    tau_thres: float = 1.0
    lambda_thres: float = -1e-6
    delta: float = 0.05
    eigen_epochs: int = 1
    eigen_rate: float = 0.05
    eigen_batch: int = 100
    power_init: int = 10  # power steps on one batch to start the eigenvector search
    phase_epochs: Optional[int] = None  # SGD epochs between splits; None means train_cfg.epochs
    final_epochs: Optional[int] = None  # epochs after the last split; None follows the schedule
    scale_phases: bool = False  # shrink phases as p_init / p_cur so each costs about the same

    def epochs_at(self, p_cur: int, base: int) -> int:
        if not self.scale_phases:
            return base
        return max(1, int(np.ceil(base * self.p_init / p_cur)))

    def validate(self) -> None:
        if not 1 <= self.p_init <= self.p_max:
            raise DomainError("need 1 <= p_init <= p_max")
        if not 0.0 < self.tau_thres <= 1.0:
            raise DomainError("tau_thres must lie in (0, 1]")
        if self.lambda_thres > 0 or self.delta <= 0:
            raise DomainError("lambda_thres must be <= 0 and delta > 0")


@dataclass
class SplitReport:
    lambda_min: np.ndarray  # per memory row
    eigvecs: np.ndarray  # (P, N), unit and tangent to each memory
    trace: list = field(default_factory=list)  # min over units of the batch quotient
    selected: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def _responsibilities(model: DamModel, batch: LabeledDataset) -> np.ndarray:
    return effective_gradients(model, batch).responsibilities


def _quotients(model: DamModel, inputs: np.ndarray, resp: np.ndarray, eigvecs: np.ndarray):
    """Per-unit quotient and its gradient with respect to the eigvec rows."""
    b = model.beta_eff
    w = model.memories
    along_u = inputs @ eigvecs.T
    along_w = inputs @ w.T
    cos = np.sum(eigvecs * w, axis=1)
    resid = along_u - cos[None, :] * along_w
    f = b * b * resid**2 + b * along_w * (cos**2 - 1.0)[None, :]
    m = len(inputs)
    values = -np.sum(resp * f, axis=0) / m
    rs = resp * resid
    grad = 2.0 * b * b * (rs.T @ inputs - np.sum(rs * along_w, axis=0)[:, None] * w)
    grad += 2.0 * b * (np.sum(resp * along_w, axis=0) * cos)[:, None] * w
    return values, -grad / m


def rayleigh_quotient(model: DamModel, unit: int, u: np.ndarray, batch: LabeledDataset) -> float:
    """u^T S_unit u estimated on the batch (unit is a memory row index)."""
    resp = _responsibilities(model, batch)
    eigvecs = np.tile(np.asarray(u, dtype=float), (model.n_hidden, 1))
    values, _ = _quotients(model, batch.inputs, resp, eigvecs)
    return float(values[unit])


def rayleigh_gradient(model: DamModel, unit: int, u: np.ndarray, batch: LabeledDataset) -> np.ndarray:
    """Euclidean gradient of rayleigh_quotient with respect to u."""
    resp = _responsibilities(model, batch)
    eigvecs = np.tile(np.asarray(u, dtype=float), (model.n_hidden, 1))
    _, grads = _quotients(model, batch.inputs, resp, eigvecs)
    return grads[unit]


def _project_out(v: np.ndarray, *dirs: np.ndarray) -> np.ndarray:
    for d in dirs:
        v = v - np.sum(v * d, axis=1, keepdims=True) * d
    return v


def _power_start(model: DamModel, batch: LabeledDataset, u: np.ndarray, steps: int) -> np.ndarray:
    """A few power steps with each unit's responsibility-weighted batch covariance.

    On the tangent sphere the quotient is a negative multiple of u^T C u plus
    a constant, with C the weighted covariance of tangent-projected inputs, so
    the power direction of C is a cheap start. Units with no weight in the
    batch keep their random start.
    """
    w = model.memories
    resp = _responsibilities(model, batch)
    x = batch.inputs
    along_w = x @ w.T
    for _ in range(steps):
        resid = x @ u.T - np.sum(u * w, axis=1)[None, :] * along_w
        v = _project_out((resp * resid).T @ x, w)
        norms = np.linalg.norm(v, axis=1)
        ok = norms > 1e-12 * max(1.0, float(norms.max(initial=0.0)))
        u = np.where(ok[:, None], v / np.where(ok, norms, 1.0)[:, None], u)
    return u


def minimize_rayleigh(
    model: DamModel, data: LabeledDataset, cfg: SplitConfig, rng: np.random.Generator
) -> SplitReport:
    """Minimum-curvature tangent direction of every memory by normalized sphere SGD.

    Gradients are divided by a running RMS of their norm (decay 0.9), kept
    orthogonal to both the current direction and the memory, and the
    direction is renormalized after each step. The reported eigenvalues are
    the quotients of the final directions over the whole dataset.
    """
    w = model.memories
    u = _project_out(sample_uniform_sphere(model.n_dim, rng, size=model.n_hidden), w)
    u = normalize_to_sphere(u)
    if cfg.power_init:
        u = _power_start(model, data.subset(rng.permutation(len(data))[: cfg.eigen_batch]), u, cfg.power_init)
    rms = np.zeros(model.n_hidden)
    trace = []
    m = len(data)
    for _ in range(cfg.eigen_epochs):
        order = rng.permutation(m)
        for lo in range(0, m, cfg.eigen_batch):
            batch = data.subset(order[lo : lo + cfg.eigen_batch])
            resp = _responsibilities(model, batch)
            values, grads = _quotients(model, batch.inputs, resp, u)
            trace.append(float(values.min()))
            grads = _project_out(grads, w, u)
            sq = np.sum(grads * grads, axis=1)
            rms = 0.9 * rms + 0.1 * sq
            scale = np.where(rms > 0, 1.0 / np.sqrt(np.where(rms > 0, rms, 1.0)), 0.0)
            u = u - cfg.eigen_rate * scale[:, None] * grads
            u = normalize_to_sphere(_project_out(u, w))
    total = np.zeros(model.n_hidden)
    for lo in range(0, m, cfg.eigen_batch):
        batch = data.subset(np.arange(lo, min(lo + cfg.eigen_batch, m)))
        values, _ = _quotients(model, batch.inputs, _responsibilities(model, batch), u)
        total += values * len(batch)
    return SplitReport(lambda_min=total / m, eigvecs=u, trace=trace)


def split_capacity(cfg: SplitConfig, p_cur: int, p_max: int) -> int:
    return max(0, min(int(np.floor(cfg.tau_thres * p_cur)), p_max - p_cur))


def select_split_set(report: SplitReport, cfg: SplitConfig, p_cur: int, p_max: int) -> np.ndarray:
    """Memory rows with the most negative eigenvalues at or below the threshold, up to capacity."""
    if p_cur > p_max:
        raise DomainError("p_cur exceeds p_max")
    order = np.argsort(report.lambda_min, kind="stable")
    eligible = order[report.lambda_min[order] <= cfg.lambda_thres]
    return eligible[: split_capacity(cfg, p_cur, p_max)]


def _duplicate(model: DamModel, opt: OptimizerState, indices: np.ndarray, eigvecs: np.ndarray, delta: float):
    p = model.n_hidden
    w = model.memories
    memories = np.concatenate([w, w[indices]], axis=0)
    if delta > 0:
        memories[indices] = normalize_to_sphere(w[indices] + delta * eigvecs[indices])
        memories[p:] = normalize_to_sphere(w[indices] - delta * eigvecs[indices])
    rows = indices + 1
    cw = model.class_weights
    entries = np.concatenate([cw.entries, 0.5 * cw.entries[rows]], axis=0)
    entries[rows] *= 0.5
    h = np.concatenate([cw.row_marginals, 0.5 * cw.row_marginals[rows]])
    h[rows] *= 0.5
    entries, _ = sinkhorn_scale(entries, h, cw.col_marginals, allow_zeros=True)
    new_model = DamModel(memories, TransportMatrix(entries, h, cw.col_marginals), model.beta, model.varsigma)
    r = len(indices)
    new_opt = OptimizerState(
        np.concatenate([opt.memories, np.zeros((r, model.n_dim))], axis=0),
        np.concatenate([opt.class_weights, np.zeros((r, cw.shape[1]))], axis=0),
        opt.beta,
    )
    return new_model, new_opt


def apply_split(
    model: DamModel,
    opt: OptimizerState,
    indices,
    report: SplitReport,
    cfg: SplitConfig,
    batch: Optional[LabeledDataset] = None,
    delta: Optional[float] = None,
) -> tuple[DamModel, OptimizerState, float]:
    """Duplicate the selected memories and push each pair apart along its eigvec.

    Split rows of the class weights and their hidden marginals are halved and
    copied, which keeps every column sum. Because the class-weight rate is
    recomputed from the current P on every step, the rescaling of g by
    (P + R) / P is implicit. New momentum rows start at zero.

    If a batch is given and the displaced model has a higher loss on it than
    plain duplication, delta is halved once.

    Returns:
        (new model, new optimizer state, delta actually used).
    """
    indices = np.asarray(indices, dtype=int)
    if indices.size == 0 or np.any(indices < 0) or np.any(indices >= model.n_hidden) or len(set(indices.tolist())) != indices.size:
        raise InvalidSplit("indices must be distinct memory rows")
    delta = cfg.delta if delta is None else delta
    new_model, new_opt = _duplicate(model, opt, indices, report.eigvecs, delta)
    if batch is not None and delta > 0:
        baseline = effective_loss(model, batch)
        if effective_loss(new_model, batch) > baseline:
            delta *= 0.5
            new_model, new_opt = _duplicate(model, opt, indices, report.eigvecs, delta)
    return new_model, new_opt, delta


@dataclass
class PhaseRecord:
    p_cur: int
    epochs: int
    sgd_seconds: float
    eigen_seconds: float = 0.0
    loss: float = float("nan")
    accuracy: float = float("nan")
    n_split: int = 0
    lambda_min: float = float("nan")


@dataclass
class SplitHistory:
    phases: list = field(default_factory=list)
    epochs: History = field(default_factory=History)
    stop_reason: str = ""

    @property
    def p_trajectory(self) -> list:
        return [ph.p_cur for ph in self.phases]

    @property
    def seconds(self) -> float:
        return sum(ph.sgd_seconds + ph.eigen_seconds for ph in self.phases)


def splitting_descent(
    data: LabeledDataset,
    cfg: SplitConfig,
    train_cfg: TrainConfig,
    rng: Optional[np.random.Generator] = None,
) -> tuple[DamModel, SplitHistory]:
    """Train a small model, then alternately split and retrain until p_max memories.

    The null mass parameter is P0 = p_init / p_max so that the null slot keeps
    the share it would have in a model started at full width. The last round
    splits exactly p_max - p_cur units, taking the most negative eigenvalues
    once at least one passes the threshold.
    """
    cfg.validate()
    train_cfg.validate()
    rng = make_rng(train_cfg.seed) if rng is None else rng
    base_epochs = train_cfg.epochs if cfg.phase_epochs is None else cfg.phase_epochs

    def epochs_for(p_cur: int) -> int:
        if p_cur >= cfg.p_max and cfg.final_epochs is not None:
            return cfg.final_epochs
        return cfg.epochs_at(p_cur, base_epochs)
    model = init_model(
        cfg.p_init,
        data.inputs.shape[1],
        class_proportions(data),
        rng,
        train_cfg.beta,
        train_cfg.varsigma,
        p0=cfg.p_init / cfg.p_max,
    )
    opt = OptimizerState.zeros_like(model)
    history = SplitHistory()

    def phase(epochs: int, record: PhaseRecord) -> None:
        start = time.perf_counter()
        before = len(history.epochs.epochs)
        run_epochs(model, data, train_cfg, opt, rng, epochs, history.epochs)
        record.sgd_seconds = time.perf_counter() - start
        record.epochs = len(history.epochs.epochs) - before
        if record.epochs:
            record.loss = history.epochs.epochs[-1].loss
            record.accuracy = history.epochs.epochs[-1].accuracy
        history.phases.append(record)

    phase(epochs_for(model.n_hidden), PhaseRecord(model.n_hidden, 0, 0.0))
    while model.n_hidden < cfg.p_max:
        start = time.perf_counter()
        report = minimize_rayleigh(model, data, cfg, rng)
        chosen = select_split_set(report, cfg, model.n_hidden, cfg.p_max)
        remaining = cfg.p_max - model.n_hidden
        if chosen.size and remaining <= cfg.tau_thres * model.n_hidden:
            chosen = np.argsort(report.lambda_min, kind="stable")[:remaining]
        if chosen.size == 0:
            history.stop_reason = "no eigenvalue below threshold"
            history.phases[-1].eigen_seconds += time.perf_counter() - start
            break
        report.selected = chosen
        batch = data.subset(np.arange(min(len(data), cfg.eigen_batch)))
        model, opt, _ = apply_split(model, opt, chosen, report, cfg, batch=batch)
        eigen_seconds = time.perf_counter() - start
        epochs = epochs_for(model.n_hidden)
        record = PhaseRecord(model.n_hidden, 0, 0.0, eigen_seconds, n_split=int(chosen.size),
                             lambda_min=float(report.lambda_min.min()))
        phase(epochs, record)
    else:
        history.stop_reason = "reached p_max"
    return model, history
