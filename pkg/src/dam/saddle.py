"""Fixed points of the teacher-student order-parameter equations.

Two variants are handled. In the clamped variant the teacher patterns and
their soft labels are given explicitly; in the uniform variant the teacher
memories are orthonormal and only the class marginal matters. Both share the
slot softmax

    sigma_gamma(mu*, y) = softmax_gamma(beta_eff * m[mu*, gamma] + log p[gamma, y])

where column 0 of the overlaps belongs to the null slot and is held at
log(Omega(beta) / Omega(0)) / beta_eff.

Hidden slot gamma = mu + 1 corresponds to memory row mu, as in the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionMismatch, DomainError, InvalidState, NotConverged, SaturationViolated, ZeroVector
from .model import DamModel, LabeledDataset, effective_gradients
from .numerics import log_vmf_norm, normalize_to_sphere, varsigma
from .polytope import TransportMatrix, lagrange_normalize


def null_overlap(n_dim: int, beta: float, beta_eff: float) -> float:
    """Overlap assigned to the null slot so that its logit is log(Omega(beta) / Omega(0))."""
    return (log_vmf_norm(n_dim, beta) - log_vmf_norm(n_dim, 0.0)) / beta_eff


@dataclass
class SaddleState:
    x_bar: np.ndarray  # (P, N)
    p_bar: np.ndarray  # (P+1, C+1)
    overlaps: np.ndarray  # (P*, P+1), column 0 is the null slot
    class_weights: TransportMatrix
    beta_eff: float
    rho: float = math.inf
    dead: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self) -> None:
        p = self.x_bar.shape[0]
        if self.overlaps.shape[1] != p + 1 or self.class_weights.shape[0] != p + 1 or self.p_bar.shape != self.class_weights.shape:
            raise InvalidState("inconsistent hidden-unit counts")
        if self.dead.shape != (p,):
            self.dead = np.zeros(p, dtype=bool)

    @property
    def p_h(self) -> np.ndarray:
        return self.class_weights.row_marginals

    def distance(self, other: "SaddleState") -> float:
        return max(
            float(np.max(np.abs(self.overlaps - other.overlaps))),
            float(np.max(np.abs(self.class_weights.entries - other.class_weights.entries))),
        )

    def check(self) -> None:
        if np.any(self.overlaps[:, 1:] < -1 - 1e-9) or np.any(self.overlaps[:, 1:] > 1 + 1e-9):
            raise InvalidState("overlaps outside [-1, 1]")
        if not self.class_weights.is_feasible(1e-8):
            raise InvalidState("class weights infeasible")
        if np.ptp(self.overlaps[:, 0]) > 1e-12:
            raise InvalidState("null overlaps must be constant")


@dataclass
class UniformSaddleState:
    m_hat: np.ndarray  # (P*, P)
    overlaps: np.ndarray  # (P*, P+1)
    class_weights: TransportMatrix
    p_star_q: np.ndarray  # teacher class marginal, (C+1,)
    beta_eff: float
    rho: float = math.inf

    def distance(self, other: "UniformSaddleState") -> float:
        return max(
            float(np.max(np.abs(self.overlaps - other.overlaps))),
            float(np.max(np.abs(self.class_weights.entries - other.class_weights.entries))),
        )


def slot_posteriors(overlaps: np.ndarray, p: np.ndarray, beta_eff: float) -> np.ndarray:
    """sigma[mu*, gamma, y]; classes with no weight anywhere get all zeros."""
    with np.errstate(divide="ignore"):
        log_p = np.log(p)
    logits = beta_eff * overlaps[:, :, None] + log_p[None, :, :]
    top = np.max(logits, axis=1, keepdims=True)
    live = np.isfinite(top)
    e = np.exp(logits - np.where(live, top, 0.0))
    e = np.where(live, e, 0.0)
    total = e.sum(axis=1, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def _overlap_update(patterns: np.ndarray, x_bar: np.ndarray, beta_eff: float, rho: float, old: np.ndarray):
    norms = np.linalg.norm(x_bar, axis=1)
    dead = norms == 0.0
    safe = np.where(dead, 1.0, norms)
    factor = np.ones_like(norms) if math.isinf(rho) else varsigma(2.0 * beta_eff * rho * norms)
    new = factor[None, :] * (patterns @ x_bar.T) / safe[None, :]
    new[:, dead] = old[:, dead]
    return new, dead


def fixed_point_step_clamped(
    state: SaddleState, patterns: np.ndarray, soft_labels: np.ndarray, damping: float = 0.5
) -> SaddleState:
    """One damped sweep of the clamped-pattern equations.

    Memories whose x_bar vanishes keep their previous overlaps and are marked
    in the returned state's `dead` mask.
    """
    if not 0.0 < damping <= 1.0:
        raise DomainError("damping must lie in (0, 1]")
    patterns = np.asarray(patterns, dtype=float)
    q = np.asarray(soft_labels, dtype=float)
    if patterns.shape[0] != state.overlaps.shape[0] or q.shape != (patterns.shape[0], state.p_bar.shape[1]):
        raise DimensionMismatch("patterns, labels and state disagree")
    p = state.class_weights
    sigma = slot_posteriors(state.overlaps, p.entries, state.beta_eff)
    resp = np.einsum("ky,kgy->kg", q, sigma)
    p_bar = np.einsum("ky,kgy->gy", q, sigma)
    x_bar = resp[:, 1:].T @ patterns
    new_m, dead = _overlap_update(patterns, x_bar, state.beta_eff, state.rho, state.overlaps[:, 1:])
    new_p = lagrange_normalize(p_bar, p.row_marginals, p.col_marginals)
    overlaps = state.overlaps.copy()
    overlaps[:, 1:] = (1.0 - damping) * state.overlaps[:, 1:] + damping * new_m
    entries = (1.0 - damping) * p.entries + damping * new_p.entries
    return SaddleState(
        x_bar=x_bar,
        p_bar=p_bar,
        overlaps=overlaps,
        class_weights=TransportMatrix(entries, p.row_marginals, p.col_marginals),
        beta_eff=state.beta_eff,
        rho=state.rho,
        dead=dead,
    )


def clamped_residual(state: SaddleState, patterns: np.ndarray, soft_labels: np.ndarray) -> float:
    """L-infinity change of overlaps and class weights under one undamped sweep."""
    return state.distance(fixed_point_step_clamped(state, patterns, soft_labels, 1.0))


def fixed_point_step_uniform(state: UniformSaddleState, damping: float = 0.5) -> UniformSaddleState:
    """One damped sweep of the orthonormal-teacher equations."""
    if not 0.0 < damping <= 1.0:
        raise DomainError("damping must lie in (0, 1]")
    p = state.class_weights
    pq = np.asarray(state.p_star_q, dtype=float)
    sigma = slot_posteriors(state.overlaps, p.entries, state.beta_eff)
    m_hat = np.einsum("y,kgy->kg", pq, sigma)[:, 1:]
    p_bar = pq[None, :] * sigma.sum(axis=0)
    norms = np.linalg.norm(m_hat, axis=0)
    dead = norms == 0.0
    safe = np.where(dead, 1.0, norms)
    factor = np.ones_like(norms) if math.isinf(state.rho) else varsigma(2.0 * state.beta_eff * state.rho * norms)
    new_m = factor[None, :] * m_hat / safe[None, :]
    new_m[:, dead] = state.overlaps[:, 1:][:, dead]
    new_p = lagrange_normalize(p_bar, p.row_marginals, p.col_marginals)
    overlaps = state.overlaps.copy()
    overlaps[:, 1:] = (1.0 - damping) * state.overlaps[:, 1:] + damping * new_m
    entries = (1.0 - damping) * p.entries + damping * new_p.entries
    return UniformSaddleState(
        m_hat=m_hat,
        overlaps=overlaps,
        class_weights=TransportMatrix(entries, p.row_marginals, p.col_marginals),
        p_star_q=pq,
        beta_eff=state.beta_eff,
        rho=state.rho,
    )


def solve_fixed_point(
    initial,
    step: Callable,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    damping: float = 0.5,
):
    """Iterate `step(state, damping)` until the L-infinity change drops below tol.

    Returns:
        (state, converged, history of changes). Non-convergence is reported
        through the flag, not raised.
    """
    state = initial
    history = []
    for _ in range(max_iter):
        new = step(state, damping)
        change = new.distance(state)
        history.append(change)
        state = new
        if change < tol:
            return state, True, history
    return state, False, history


def duplicate_state(state: SaddleState, r: int) -> SaddleState:
    """Append copies of the first r hidden units, halving their class mass.

    The result is a fixed point of the equations with P + r units whenever
    the input is one with P units.
    """
    p = state.x_bar.shape[0]
    if not 1 <= r <= p:
        raise DomainError(f"r must lie in 1..{p}")
    rows = np.arange(1, r + 1)

    def split_rows(mat: np.ndarray) -> np.ndarray:
        out = np.concatenate([mat, mat[rows]], axis=0)
        out[rows] *= 0.5
        out[p + 1 :] *= 0.5
        return out

    h = state.p_h.copy()
    new_h = np.concatenate([h, 0.5 * h[rows]])
    new_h[rows] *= 0.5
    weights = TransportMatrix(split_rows(state.class_weights.entries), new_h, state.class_weights.col_marginals)
    return SaddleState(
        x_bar=np.concatenate([state.x_bar, state.x_bar[:r]], axis=0),
        p_bar=split_rows(state.p_bar),
        overlaps=np.concatenate([state.overlaps, state.overlaps[:, rows]], axis=1),
        class_weights=weights,
        beta_eff=state.beta_eff,
        rho=state.rho,
        dead=np.concatenate([state.dead, state.dead[:r]]),
    )


def xbar_map(x_bar: np.ndarray, state: SaddleState, patterns: np.ndarray, soft_labels: np.ndarray) -> np.ndarray:
    """The x_bar -> x_bar map with class weights held fixed (undamped)."""
    new_m, _ = _overlap_update(patterns, x_bar, state.beta_eff, state.rho, state.overlaps[:, 1:])
    overlaps = np.concatenate([state.overlaps[:, :1], new_m], axis=1)
    sigma = slot_posteriors(overlaps, state.class_weights.entries, state.beta_eff)
    resp = np.einsum("ky,kgy->kg", soft_labels, sigma)
    return resp[:, 1:].T @ patterns


@dataclass
class Spectrum:
    values: np.ndarray  # complex, sorted by decreasing modulus
    vectors: np.ndarray  # columns are flattened x_bar perturbations
    base: np.ndarray  # x_bar at which the Jacobian was evaluated
    sweeps: int

    @property
    def moduli(self) -> np.ndarray:
        return np.abs(self.values)


def stability_spectrum(
    state: SaddleState,
    patterns: np.ndarray,
    soft_labels: np.ndarray,
    k: int = 4,
    step: float = 1e-5,
    max_sweeps: int = 500,
    tol: float = 1e-4,
    seed: int = 0,
) -> Spectrum:
    """Leading eigenvalues of the Jacobian of the x_bar map at a fixed point.

    The Jacobian is evaluated at the self-consistent x_bar (one application of
    the map, which fixes the norms of duplicated units) and accessed only
    through central finite-difference products. Subspace iteration with a
    Rayleigh-Ritz projection extracts the k eigenvalues of largest modulus.

    Raises:
        NotConverged: the leading moduli still change by more than tol,
            relative to max(1, leading modulus), after max_sweeps sweeps.
    """
    patterns = np.asarray(patterns, dtype=float)
    soft_labels = np.asarray(soft_labels, dtype=float)
    base = xbar_map(state.x_bar, state, patterns, soft_labels)
    shape = base.shape
    dim = base.size
    k = min(k, dim)
    width = min(dim, k + 4)

    def jvp(v: np.ndarray) -> np.ndarray:
        d = v.reshape(shape)
        plus = xbar_map(base + step * d, state, patterns, soft_labels)
        minus = xbar_map(base - step * d, state, patterns, soft_labels)
        return ((plus - minus) / (2.0 * step)).ravel()

    def apply(basis: np.ndarray) -> np.ndarray:
        return np.stack([jvp(basis[:, j]) for j in range(basis.shape[1])], axis=1)

    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((dim, width)))
    previous = None
    change = np.inf
    for sweep in range(1, max_sweeps + 1):
        image = apply(basis)
        small = basis.T @ image
        vals, vecs = np.linalg.eig(small)
        order = np.argsort(-np.abs(vals), kind="stable")
        vals = vals[order]
        moduli = np.abs(vals[:k])
        if previous is not None:
            change = float(np.max(np.abs(moduli - previous)) / max(moduli[0], 1.0))
            if change < 1e-10:
                break
        previous = moduli
        basis, _ = np.linalg.qr(image)
    else:
        if change > tol:
            raise NotConverged(f"leading eigenvalues still moving ({change:.2e}) after {max_sweeps} sweeps")
    ritz = basis @ vecs[:, order[:k]]
    return Spectrum(values=vals[:k], vectors=ritz, base=base, sweeps=sweep)


def directional_curvature(
    state: SaddleState, patterns: np.ndarray, soft_labels: np.ndarray, direction: np.ndarray, step: float = 1e-5
) -> float:
    """v^T J v for a unit perturbation v of x_bar, by central differences at the self-consistent x_bar."""
    patterns = np.asarray(patterns, dtype=float)
    soft_labels = np.asarray(soft_labels, dtype=float)
    base = xbar_map(state.x_bar, state, patterns, soft_labels)
    v = np.asarray(direction, dtype=float).reshape(base.shape)
    v = v / np.linalg.norm(v)
    plus = xbar_map(base + step * v, state, patterns, soft_labels)
    minus = xbar_map(base - step * v, state, patterns, soft_labels)
    return float(np.sum(v * (plus - minus)) / (2.0 * step))


def cluster_assignment(state: SaddleState, patterns: np.ndarray, soft_labels: np.ndarray, threshold: float = 0.99):
    """Hard assignment of each pattern to its most responsible memory row.

    Raises:
        SaturationViolated: some pattern's largest responsibility is below threshold.
    """
    sigma = slot_posteriors(state.overlaps, state.class_weights.entries, state.beta_eff)
    resp = np.einsum("ky,kgy->kg", np.asarray(soft_labels, float), sigma)
    top = resp.max(axis=1)
    if np.any(top <= threshold):
        raise SaturationViolated(f"smallest top responsibility {top.min():.4f} <= {threshold}")
    return np.argmax(resp, axis=1) - 1  # -1 means the null slot


def duplicate_quadratic_form(
    state: SaddleState,
    patterns: np.ndarray,
    soft_labels: np.ndarray,
    u: np.ndarray,
    split_index: int,
    threshold: float = 0.99,
) -> float:
    """Closed-form curvature of the antisymmetric mode created by duplicating one memory.

    Args:
        state: saturated fixed point before duplication.
        u: unit vector orthogonal to the split memory's direction.
        split_index: memory row being duplicated.

    Returns:
        beta_eff / |x'| * sum over the memory's cluster of (x . u)^2, where x'
        is the sum of the cluster's patterns; 0 for an empty cluster.
    """
    patterns = np.asarray(patterns, dtype=float)
    u = np.asarray(u, dtype=float)
    direction = normalize_to_sphere(state.x_bar[split_index])
    if abs(float(u @ direction)) > 1e-8 or abs(np.linalg.norm(u) - 1.0) > 1e-8:
        raise DomainError("u must be a unit vector orthogonal to the split memory")
    members = cluster_assignment(state, patterns, soft_labels, threshold) == split_index
    if not np.any(members):
        return 0.0
    cluster = patterns[members]
    total = np.linalg.norm(cluster.sum(axis=0))
    if total == 0.0:
        raise ZeroVector("cluster patterns sum to zero")
    return float(state.beta_eff / total * np.sum((cluster @ u) ** 2))


def clamped_state_from_model(
    model: DamModel, patterns: np.ndarray, rho: float = math.inf
) -> SaddleState:
    """Clamped state whose overlaps are those of the model's memories with the patterns."""
    patterns = np.asarray(patterns, dtype=float)
    beta_eff = model.beta_eff
    overlaps = np.empty((patterns.shape[0], model.n_hidden + 1))
    overlaps[:, 0] = null_overlap(model.n_dim, model.beta, beta_eff)
    overlaps[:, 1:] = patterns @ model.memories.T
    return SaddleState(
        x_bar=model.memories.copy(),
        p_bar=model.class_weights.entries.copy(),
        overlaps=overlaps,
        class_weights=model.class_weights.copy(),
        beta_eff=beta_eff,
        rho=rho,
    )


def model_from_clamped_state(state: SaddleState, beta: float) -> DamModel:
    """Memories x_bar / |x_bar| with the state's class weights; varsigma = beta_eff / beta."""
    return DamModel(normalize_to_sphere(state.x_bar), state.class_weights.copy(), float(beta), state.beta_eff / beta)


@dataclass
class StationarityResidual:
    memories: float
    class_weights: float

    @property
    def total(self) -> float:
        return max(self.memories, self.class_weights)


def stationarity_residual(model: DamModel, data: LabeledDataset) -> StationarityResidual:
    """Distance of the model from the fixed point of its own stationarity equations.

    The target memories are the responsibility-weighted input sums and the
    target class weights are the Lagrange projection of the summed class
    responsibilities, both under the model's effective loss.

    Raises:
        ZeroVector: some memory receives no responsibility at all.
    """
    grads = effective_gradients(model, data)
    w_bar = grads.responsibilities.T @ data.inputs
    if np.any(np.linalg.norm(w_bar, axis=1) == 0.0):
        raise ZeroVector("a memory has no responsibility (dead unit)")
    w_target = normalize_to_sphere(w_bar)
    p = model.class_weights
    p_bar = -len(data) * grads.class_weights * p.entries
    target = lagrange_normalize(p_bar, p.row_marginals, p.col_marginals)
    return StationarityResidual(
        memories=float(np.max(np.linalg.norm(model.memories - w_target, axis=1))),
        class_weights=float(np.max(np.abs(p.entries - target.entries))),
    )
