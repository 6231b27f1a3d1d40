"""Nonnegative matrices with prescribed row and column sums.

The class weights of the model live on such a transport polytope: rows are
hidden slots (null slot first), columns are classes (null class first). Rows
or columns whose marginal is zero are held at zero throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    InfeasibleMarginals,
    NonPositiveEntry,
    NotConverged,
    SingularDenominator,
)

MARGINAL_ATOL = 1e-10


@dataclass
class TransportMatrix:
    """A matrix together with the row and column sums it must satisfy."""

    entries: np.ndarray
    row_marginals: np.ndarray
    col_marginals: np.ndarray

    def __post_init__(self) -> None:
        self.entries = np.asarray(self.entries, dtype=float)
        self.row_marginals = np.asarray(self.row_marginals, dtype=float)
        self.col_marginals = np.asarray(self.col_marginals, dtype=float)
        _check_marginals(self.entries.shape, self.row_marginals, self.col_marginals)

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    def residual(self) -> float:
        """Largest absolute deviation from the prescribed marginals."""
        return max(
            float(np.max(np.abs(self.entries.sum(axis=1) - self.row_marginals))),
            float(np.max(np.abs(self.entries.sum(axis=0) - self.col_marginals))),
        )

    def is_feasible(self, atol: float = MARGINAL_ATOL) -> bool:
        return bool(np.all(self.entries >= 0.0)) and self.residual() <= atol

    def copy(self) -> "TransportMatrix":
        return TransportMatrix(self.entries.copy(), self.row_marginals.copy(), self.col_marginals.copy())


def _check_marginals(shape, row_m: np.ndarray, col_m: np.ndarray) -> None:
    if len(shape) != 2 or row_m.shape != (shape[0],) or col_m.shape != (shape[1],):
        raise DimensionMismatch(f"matrix {shape} vs marginals {row_m.shape}, {col_m.shape}")
    if np.any(row_m < 0) or np.any(col_m < 0):
        raise InfeasibleMarginals("marginals must be non-negative")
    if abs(row_m.sum() - col_m.sum()) > 1e-9 * max(1.0, row_m.sum()):
        raise InfeasibleMarginals("row and column marginals have different totals")


def _safe_ratio(target: np.ndarray, current: np.ndarray) -> np.ndarray:
    out = np.zeros_like(current)
    np.divide(target, current, out=out, where=current > 0)
    return out


def sinkhorn_scale(
    k: np.ndarray,
    row_marginals: np.ndarray,
    col_marginals: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    allow_zeros: bool = False,
    relax_after: int = 60,
) -> tuple[np.ndarray, int]:
    """Alternating row and column rescaling of k onto the transport polytope.

    Plain Sinkhorn-Knopp sweeps are used first. If the marginals are still off
    after `relax_after` sweeps, the per-sweep contraction rate rho is
    watched until it settles, then sets an over-relaxation factor
    2 / (1 + sqrt(1 - rho)) for the remaining sweeps. Nearly sparse matrices, which the class weights become
    late in training, otherwise need thousands of sweeps. The relaxation is
    dropped again if the residual stalls or blows up. Either way the limit is the same
    diagonal scaling of k.

    Args:
        k: nonnegative matrix; strictly positive unless allow_zeros is set.
        row_marginals, col_marginals: target sums with equal totals.
        tol: L-infinity tolerance on both marginals.
        max_iter: number of row+column sweeps before giving up.
        allow_zeros: accept structural zeros, which then stay zero.
        relax_after: sweeps before over-relaxation may start; 0 disables it.

    Returns:
        The scaled matrix and the number of sweeps used.
    """
    k = np.array(k, dtype=float)
    row_m = np.asarray(row_marginals, dtype=float)
    col_m = np.asarray(col_marginals, dtype=float)
    _check_marginals(k.shape, row_m, col_m)
    if not np.all(np.isfinite(k)):
        raise NonPositiveEntry("matrix entries must be finite")
    if allow_zeros:
        if np.any(k < 0):
            raise NonPositiveEntry("matrix entries must be non-negative")
    elif np.any(k <= 0):
        raise NonPositiveEntry("matrix entries must be strictly positive")
    rows = row_m > 0
    cols = col_m > 0
    k[~rows, :] = 0.0
    k[:, ~cols] = 0.0
    if np.any((k.sum(axis=1) == 0) & rows) or np.any((k.sum(axis=0) == 0) & cols):
        raise InfeasibleMarginals("a line with positive marginal has no support")
    u = rows.astype(float)
    v = cols.astype(float)
    omega = 1.0
    relaxed = False
    errors = []
    err = np.inf
    kv = k @ v
    for it in range(1, max_iter + 1):
        u_new = _safe_ratio(row_m, kv)
        u = u_new if omega == 1.0 else np.where(rows, np.where(rows, u, 1.0) ** (1.0 - omega) * u_new**omega, 0.0)
        ku = k.T @ u
        v_new = _safe_ratio(col_m, ku)
        v = v_new if omega == 1.0 else np.where(cols, np.where(cols, v, 1.0) ** (1.0 - omega) * v_new**omega, 0.0)
        kv = k @ v
        err = max(np.max(np.abs(u * kv - row_m)), np.max(np.abs(v * ku - col_m)))
        if err <= tol:
            return u[:, None] * k * v[None, :], it
        errors.append(err)
        if relax_after and not relaxed and it >= max(relax_after, 31):
            rates = [(errors[-1 - 10 * j] / errors[-11 - 10 * j]) ** 0.1 for j in range(3)]
            rho = rates[0]
            if rho < 1.0 and max(rates) - min(rates) < 0.02 * (1.0 - rho):
                omega = min(2.0 / (1.0 + np.sqrt(1.0 - rho)), 1.95)
                relaxed = True
                start_err, best, stalled = err, np.inf, 0
        elif relaxed and omega != 1.0:
            # fall back to plain sweeps on divergence or a long stall
            if err < 0.999 * best:
                best, stalled = err, 0
            else:
                stalled += 1
            if err > 1e3 * start_err or stalled > 200:
                omega = 1.0
    raise NotConverged(f"sinkhorn residual {err:.3e} after {max_iter} sweeps")


def lagrange_multipliers(
    p_bar: np.ndarray,
    row_marginals: np.ndarray,
    col_marginals: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 10_000,
    damping: float = 0.5,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Find p = p_bar / (lam_col + omega_row) with the prescribed marginals.

    The multipliers minimize the convex dual
        sum_y lam_y q_y + sum_g omega_g h_g - sum p_bar log(lam_y + omega_g),
    whose gradient is the marginal residual. It is solved by Newton steps,
    each shrunk by the damping factor until lam + omega stays positive on
    the support and the dual or the residual decreases.

    Returns:
        (p, lam, omega) with lam indexed by column and omega by row. Lines
        with zero marginal get zero entries and an infinite multiplier.

    Raises:
        InfeasibleMarginals: an empty line with positive marginal.
        SingularDenominator: the steps stall because lam + omega collapses
            towards 0 on the support (below 1e-14 relative to the largest).
        NotConverged: no convergence within max_iter steps.
    """
    p_bar = np.asarray(p_bar, dtype=float)
    row_m = np.asarray(row_marginals, dtype=float)
    col_m = np.asarray(col_marginals, dtype=float)
    _check_marginals(p_bar.shape, row_m, col_m)
    if np.any(p_bar < 0) or not np.all(np.isfinite(p_bar)):
        raise NonPositiveEntry("p_bar must be finite and non-negative")
    rows = row_m > 0
    cols = col_m > 0
    sub = p_bar[np.ix_(rows, cols)]
    if np.any(sub.sum(axis=1) == 0) or np.any(sub.sum(axis=0) == 0):
        raise InfeasibleMarginals("p_bar has an empty line with positive marginal")
    h = row_m[rows]
    q = col_m[cols]
    support = sub > 0
    n_cols = sub.shape[1]
    start = 0.5 * sub.sum() / h.sum()
    lam = np.full(n_cols, start)
    omega = np.full(sub.shape[0], start)

    def evaluate(lam_, omega_):
        d = lam_[None, :] + omega_[:, None]
        if np.any(d[support] <= 1e-14 * np.abs(d[support]).max()):
            return None
        safe = np.where(support, d, 1.0)
        pp = np.where(support, sub / safe, 0.0)
        value = lam_ @ q + omega_ @ h - np.sum(np.where(support, sub * np.log(safe), 0.0))
        grad = np.concatenate([q - pp.sum(axis=0), h - pp.sum(axis=1)])
        return value, grad, pp, safe

    value, grad, p, d = evaluate(lam, omega)
    res = float(np.max(np.abs(grad)))
    stalled = 0
    best, since_best = res, 0
    for _ in range(max_iter):
        curv = np.where(support, sub / d**2, 0.0)
        # lam + omega can cancel; rounding in the sum then bounds the attainable residual
        spread = curv * (np.abs(lam)[None, :] + np.abs(omega)[:, None]) * np.finfo(float).eps
        floor = 8.0 * max(spread.sum(axis=0).max(), spread.sum(axis=1).max())
        if res <= max(tol, floor):
            break
        hess = np.block([[np.diag(curv.sum(axis=0)), curv.T], [curv, np.diag(curv.sum(axis=1))]])
        # Jacobi scaling, then a min-norm solve: the shift lam + c, omega - c
        # leaves the dual unchanged, so the Hessian is singular
        scale = 1.0 / np.sqrt(np.diag(hess))
        step = -scale * np.linalg.lstsq(hess * np.outer(scale, scale), scale * grad, rcond=None)[0]
        slope = float(grad @ step)
        t = 1.0
        while t > 1e-30:
            trial = evaluate(lam + t * step[:n_cols], omega + t * step[n_cols:])
            if trial is not None:
                trial_res = float(np.max(np.abs(trial[1])))
                if trial[0] <= value + 1e-4 * t * slope or trial_res < res:
                    break
            t *= damping
        else:
            raise SingularDenominator(f"lam + omega collapses on the support at residual {res:.3e}")
        stalled = stalled + 1 if t < 1e-8 else 0
        if stalled > 50:
            ratio = float(d[support].min() / d[support].max())
            if ratio < 1e-8:
                raise SingularDenominator(f"lam + omega collapses on the support (ratio {ratio:.1e})")
            raise NotConverged(f"lagrange steps stalled at residual {res:.3e}")
        lam = lam + t * step[:n_cols]
        omega = omega + t * step[n_cols:]
        value, grad, p, d = trial
        res = trial_res
        if res < 0.99 * best:
            best, since_best = res, 0
        else:
            since_best += 1
            if since_best > 100:
                raise NotConverged(f"lagrange residual stuck at {res:.3e}")
    else:
        raise NotConverged(f"lagrange residual {res:.3e} after {max_iter} steps")
    out = np.zeros_like(p_bar)
    out[np.ix_(rows, cols)] = p
    lam_all = np.full(col_m.shape, np.inf)
    lam_all[cols] = lam
    omega_all = np.full(row_m.shape, np.inf)
    omega_all[rows] = omega
    return out, lam_all, omega_all


def lagrange_normalize(
    p_bar: np.ndarray, row_marginals: np.ndarray, col_marginals: np.ndarray, tol: float = 1e-12
) -> TransportMatrix:
    """Project unnormalized class weights onto the polytope with Lagrange multipliers."""
    p, _, _ = lagrange_multipliers(p_bar, row_marginals, col_marginals, tol=tol)
    return TransportMatrix(p, np.asarray(row_marginals, float), np.asarray(col_marginals, float))


def multiplicative_step(
    p: TransportMatrix, grad: np.ndarray, learn_rate: float, tol: float = 1e-10, max_iter: int = 10_000
) -> tuple[TransportMatrix, int]:
    """Exponentiated-gradient ascent step followed by Sinkhorn scaling.

    Zero entries stay zero. Returns the new matrix and the Sinkhorn sweep count.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != p.shape:
        raise DimensionMismatch("gradient shape differs from the class weights")
    expo = learn_rate * grad
    # per-row shifts are absorbed by the row scaling; this only prevents overflow
    expo = expo - np.max(np.where(p.entries > 0, expo, -np.inf), axis=1, initial=-np.inf, keepdims=True).clip(-1e300)
    k = p.entries * np.exp(np.where(p.entries > 0, expo, 0.0))
    scaled, iters = sinkhorn_scale(k, p.row_marginals, p.col_marginals, tol=tol, max_iter=max_iter, allow_zeros=True)
    return TransportMatrix(scaled, p.row_marginals, p.col_marginals), iters


def class_gradient_projection(grad: np.ndarray, p: TransportMatrix) -> np.ndarray:
    """Subtract from each row its p-weighted mean, leaving rows orthogonal to p.

    Constant shifts along a row are absorbed by Sinkhorn scaling, so this
    changes the gradient only in directions the step cannot see. Entries at
    structural zeros are set to zero.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != p.shape:
        raise DimensionMismatch("gradient shape differs from the class weights")
    h = p.row_marginals
    mean = np.zeros(h.shape)
    np.divide((grad * p.entries).sum(axis=1), h, out=mean, where=h > 0)
    return np.where(p.entries > 0, grad - mean[:, None], 0.0)
