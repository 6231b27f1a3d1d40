"""Special functions, sphere geometry and random sampling.

The von Mises-Fisher normalizer on the unit sphere of R^n is

    Omega_n(r) = Omega_n(0) * Gamma(n/2) * (r/2)^(1-n/2) * I_{n/2-1}(r)

with Omega_n(0) = 2 pi^(n/2) / Gamma(n/2) the surface area. Everything here
is evaluated in log space because the Bessel order reaches several hundred
for image-sized inputs.
"""

from __future__ import annotations

import hashlib
import math
from typing import Optional

import numpy as np
from scipy import special

from .errors import DomainError, NonFiniteInput, ZeroVector

# Order above which the uniform (Debye) expansion replaces the power series
# whenever the scaled scipy Bessel value is not representable.
_DEBYE_MIN_ORDER = 30.0


def log_sphere_area(n: int) -> float:
    """Log of the surface area of the unit sphere in R^n."""
    return math.log(2.0) + 0.5 * n * math.log(math.pi) - math.lgamma(0.5 * n)


def _log_bessel_series(nu: float, r: float) -> float:
    # log I_nu(r) from the ascending series, summed in log space
    log_x = 2.0 * math.log(0.5 * r)
    log_terms = []
    log_t = 0.0
    peak = 0.0
    k = 0
    while k < 1_000_000:
        log_terms.append(log_t)
        peak = max(peak, log_t)
        k += 1
        log_t += log_x - math.log(k) - math.log(nu + k)
        if log_t < peak - 40.0:
            break
    return nu * math.log(0.5 * r) - math.lgamma(nu + 1.0) + float(special.logsumexp(log_terms))


def _debye_polys(p: float) -> list[float]:
    p2 = p * p
    u1 = p * (3.0 - 5.0 * p2) / 24.0
    u2 = p2 * (81.0 - 462.0 * p2 + 385.0 * p2 * p2) / 1152.0
    u3 = p**3 * (30375.0 - 369603.0 * p2 + 765765.0 * p2**2 - 425425.0 * p2**3) / 414720.0
    u4 = (
        p2**2
        * (
            4465125.0
            - 94121676.0 * p2
            + 349922430.0 * p2**2
            - 446185740.0 * p2**3
            + 185910725.0 * p2**4
        )
        / 39813120.0
    )
    return [1.0, u1, u2, u3, u4]


def _log_bessel_debye(nu: float, r: float) -> float:
    # uniform asymptotic expansion of I_nu(nu z) for large order
    z = r / nu
    s = math.sqrt(1.0 + z * z)
    eta = s + math.log(z / (1.0 + s))
    p = 1.0 / s
    corr = sum(u / nu**k for k, u in enumerate(_debye_polys(p)))
    return nu * eta - 0.5 * math.log(2.0 * math.pi * nu) - 0.5 * math.log(s) + math.log(corr)


def log_bessel_i(nu: float, r: float) -> float:
    """Natural log of the modified Bessel function I_nu(r) for nu >= 0, r > 0."""
    if r <= 0.0:
        raise DomainError("log_bessel_i needs r > 0")
    scaled = float(special.ive(nu, r))
    if np.isfinite(scaled) and scaled > 1e-290:
        return math.log(scaled) + r
    if nu >= _DEBYE_MIN_ORDER:
        return _log_bessel_debye(nu, r)
    return _log_bessel_series(nu, r)


def _check_norm_args(n: int, r: float) -> None:
    if not np.isfinite(r):
        raise NonFiniteInput("r must be finite")
    if r < 0.0:
        raise DomainError("r must be non-negative")
    if n < 2:
        raise DomainError("dimension must be at least 2")


def log_vmf_norm(n: int, r: float) -> float:
    """Log of the vMF normalizer Omega_n(r) on the unit sphere of R^n.

    Args:
        n: ambient dimension (>= 2).
        r: concentration (>= 0).

    Returns:
        log Omega_n(r); at r = 0 this is the log surface area.
    """
    r = float(r)
    _check_norm_args(n, r)
    base = log_sphere_area(n)
    if r == 0.0:
        return base
    nu = 0.5 * n - 1.0
    return base + (1.0 - 0.5 * n) * math.log(0.5 * r) + math.lgamma(0.5 * n) + log_bessel_i(nu, r)


def _eta(x: float) -> float:
    s = math.sqrt(1.0 + x * x)
    return s - 1.0 - math.log1p(s) + math.log(2.0)


def log_vmf_norm_asymptotic(n: int, r: float) -> float:
    """Large-n approximation of log Omega_n(r) at fixed ratio r/(n-2).

    This is the leading term of the uniform expansion, accurate to O(1/n).
    """
    r = float(r)
    if not np.isfinite(r):
        raise NonFiniteInput("r must be finite")
    if r < 0.0:
        raise DomainError("r must be non-negative")
    if n < 4:
        raise DomainError("asymptotic form needs n >= 4")
    rho = r / (n - 2.0)
    x = 2.0 * rho
    return log_sphere_area(n) - 0.25 * math.log1p(x * x) + (0.5 * n - 1.0) * _eta(x)


def bessel_ratio(nu: float, r: float, tol: float = 1e-15, max_terms: int = 1_000_000) -> float:
    """I_{nu+1}(r) / I_nu(r) from the Gauss continued fraction (modified Lentz)."""
    if r == 0.0:
        return 0.0
    # r / (2(nu+1) + r^2 / (2(nu+2) + r^2 / (2(nu+3) + ...)))
    tiny = 1e-300
    r2 = r * r
    f = 2.0 * (nu + 1.0)
    c = f
    d = 0.0
    for k in range(2, max_terms):
        b = 2.0 * (nu + k)
        d = b + r2 * d
        d = 1.0 / (d if d != 0.0 else tiny)
        c = b + r2 / (c if c != 0.0 else tiny)
        delta = c * d
        f *= delta
        if abs(delta - 1.0) < tol:
            break
    return r / f


def dlog_vmf_norm_dr(n: int, r: float) -> float:
    """Derivative of log Omega_n(r) with respect to r, equal to I_{n/2}(r)/I_{n/2-1}(r)."""
    r = float(r)
    _check_norm_args(n, r)
    return bessel_ratio(0.5 * n - 1.0, r)


def varsigma(x):
    """The squashing function x / (sqrt(x^2 + 1) + 1), mapping R onto (-1, 1)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("varsigma argument must be finite")
    out = x / (np.sqrt(x * x + 1.0) + 1.0)
    return float(out) if out.ndim == 0 else out


def softmax_null(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax over a slot axis whose first entry is the null slot."""
    logits = np.asarray(logits, dtype=float)
    if logits.shape[axis] == 0:
        raise DomainError("softmax over an empty axis")
    if np.any(np.isnan(logits)) or np.any(logits == np.inf):
        raise NonFiniteInput("logits must not contain NaN or +inf")
    return special.softmax(logits, axis=axis)


def normalize_to_sphere(v: np.ndarray) -> np.ndarray:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise NonFiniteInput("cannot normalize non-finite vector")
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroVector("cannot normalize a zero vector")
    return v / norms


def tangent_project(grad: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Remove the component of grad along the unit vector w (row-wise for matrices)."""
    grad = np.asarray(grad, dtype=float)
    w = np.asarray(w, dtype=float)
    if grad.shape != w.shape:
        raise DomainError("grad and w must have the same shape")
    return grad - np.sum(grad * w, axis=-1, keepdims=True) * w


def make_rng(seed: int, *labels: str) -> np.random.Generator:
    """Deterministic Philox stream for an integer seed and optional stream labels.

    Distinct labels give statistically independent streams from the same seed.
    """
    if seed < 0:
        raise DomainError("seed must be non-negative")
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for label in labels:
        digest = hashlib.sha256(label.encode()).digest()
        words.append(int.from_bytes(digest[:8], "little"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def sample_uniform_sphere(n: int, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Uniform draw(s) on the unit sphere of R^n."""
    if n < 1:
        raise DomainError("dimension must be positive")
    shape = (n,) if size is None else (size, n)
    while True:
        g = rng.standard_normal(shape)
        norms = np.linalg.norm(g, axis=-1, keepdims=True)
        if np.all(norms > 0):
            return g / norms


def _sample_vmf_cosines(n: int, kappa: float, rng: np.random.Generator, size: int) -> np.ndarray:
    # Wood (1994) rejection sampler for t = mu . x
    m1 = n - 1.0
    b = m1 / (2.0 * kappa + math.sqrt(4.0 * kappa * kappa + m1 * m1))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m1 * math.log(1.0 - x0 * x0)
    out = np.empty(size)
    filled = 0
    while filled < size:
        batch = max(2 * (size - filled), 16)
        z = rng.beta(0.5 * m1, 0.5 * m1, batch)
        t = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=batch)
        ok = kappa * t + m1 * np.log1p(-x0 * t) - c >= np.log(u)
        t = t[ok][: size - filled]
        out[filled : filled + t.size] = t
        filled += t.size
    return out


def sample_vmf(
    mean_dir: np.ndarray, kappa: float, rng: np.random.Generator, size: Optional[int] = None
) -> np.ndarray:
    """Draw(s) from the von Mises-Fisher distribution with unit mean direction.

    Args:
        mean_dir: unit vector of length n >= 2.
        kappa: concentration (>= 0); 0 gives the uniform distribution.
        rng: numpy generator.
        size: number of draws, or None for a single vector.
    """
    mean_dir = np.asarray(mean_dir, dtype=float)
    n = mean_dir.shape[0]
    if n < 2:
        raise DomainError("vMF sampling needs n >= 2")
    if kappa < 0 or not np.isfinite(kappa):
        raise DomainError("kappa must be finite and non-negative")
    if abs(np.linalg.norm(mean_dir) - 1.0) > 1e-8:
        raise DomainError("mean_dir must be a unit vector")
    count = 1 if size is None else size
    t = _sample_vmf_cosines(n, float(kappa), rng, count)
    v = rng.standard_normal((count, n))
    v -= np.outer(v @ mean_dir, mean_dir)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    x = t[:, None] * mean_dir[None, :] + np.sqrt(np.clip(1.0 - t * t, 0.0, None))[:, None] * v
    return x[0] if size is None else x
