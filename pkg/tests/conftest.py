import sys

import numpy as np
import pytest

from dam.model import DamModel, LabeledDataset
from dam.numerics import sample_uniform_sphere, sample_vmf
from dam.polytope import TransportMatrix, sinkhorn_scale


def random_transport(rng, n_rows, n_cols, zero_null_class=False):
    """Random strictly positive feasible class weights with random marginals."""
    rows = rng.uniform(0.5, 1.5, n_rows)
    rows /= rows.sum()
    cols = rng.uniform(0.5, 1.5, n_cols)
    if zero_null_class:
        cols[0] = 0.0
    cols /= cols.sum()
    k = rng.uniform(0.2, 1.0, (n_rows, n_cols))
    if zero_null_class:
        k[:, 0] = 0.0
    entries, _ = sinkhorn_scale(k, rows, cols, tol=1e-14, allow_zeros=zero_null_class)
    return TransportMatrix(entries, rows, cols)


def random_model(rng, n_dim=5, n_hidden=3, n_classes=2, beta=3.0, varsigma=1.0, zero_null_class=False):
    memories = sample_uniform_sphere(n_dim, rng, size=n_hidden)
    weights = random_transport(rng, n_hidden + 1, n_classes + 1, zero_null_class)
    return DamModel(memories, weights, beta, varsigma)


def random_dataset(rng, n_dim=5, n_examples=8, n_classes=2, hard=False):
    inputs = sample_uniform_sphere(n_dim, rng, size=n_examples)
    if hard:
        labels = np.zeros((n_examples, n_classes + 1))
        labels[np.arange(n_examples), rng.integers(1, n_classes + 1, n_examples)] = 1.0
    else:
        labels = rng.dirichlet(np.ones(n_classes + 1), size=n_examples)
    return LabeledDataset(inputs, labels)


def cluster_dataset(rng, centers, kappa, per_cluster, labels=None):
    """vMF clusters around the given centers; cluster k gets class labels[k] (default k + 1)."""
    centers = np.atleast_2d(centers)
    n_classes = len(centers) if labels is None else max(labels)
    labels = list(range(1, len(centers) + 1)) if labels is None else labels
    xs, ys = [], []
    for center, label in zip(centers, labels):
        xs.append(sample_vmf(center, kappa, rng, size=per_cluster))
        ys.extend([label] * per_cluster)
    soft = np.zeros((len(ys), n_classes + 1))
    soft[np.arange(len(ys)), ys] = 1.0
    return LabeledDataset(np.concatenate(xs), soft)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def tangent_directions(rng, w, count):
    """Random unit vectors orthogonal to w."""
    v = rng.normal(size=(count, len(w)))
    v -= np.outer(v @ w, w)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def exchange_directions(p):
    """Pairwise exchanges e[a,i] - e[a,j] - e[b,i] + e[b,j] inside the support of p.

    Each keeps every row and column sum, so it is tangent to the polytope.
    """
    support = p > 0
    rows, cols = p.shape
    out = []
    for a in range(rows):
        for b in range(a + 1, rows):
            for i in range(cols):
                for j in range(i + 1, cols):
                    if support[a, i] and support[a, j] and support[b, i] and support[b, j]:
                        d = np.zeros_like(p)
                        d[a, i], d[a, j], d[b, i], d[b, j] = 1.0, -1.0, -1.0, 1.0
                        out.append(d)
    return out


def relative_error(analytic, numeric):
    analytic = np.atleast_1d(analytic)
    numeric = np.atleast_1d(numeric)
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-300))


def memory_fd_check(model, batch, loss_fn, grad_fn, rng, n_dirs=20, step=1e-4):
    """Relative error between analytic and central-difference directional derivatives
    along geodesics of each memory."""
    grad = grad_fn(model, batch)
    analytic, numeric = [], []
    for mu in range(model.n_hidden):
        w = model.memories[mu].copy()
        for v in tangent_directions(rng, w, n_dirs):
            vals = []
            for t in (step, -step):
                m = model.copy()
                m.memories[mu] = np.cos(t) * w + np.sin(t) * v
                vals.append(loss_fn(m, batch))
            numeric.append((vals[0] - vals[1]) / (2 * step))
            analytic.append(grad[mu] @ v)
    return relative_error(analytic, numeric)


def class_weight_fd_check(model, batch, loss_fn, grad_fn, step=1e-6):
    grad = grad_fn(model, batch)
    p = model.class_weights.entries
    dirs = exchange_directions(p)
    if not dirs:
        return 0.0
    scale = step * p[p > 0].min()
    analytic, numeric = [], []
    for d in dirs:
        vals = []
        for t in (scale, -scale):
            m = model.copy()
            m.class_weights.entries = p + t * d
            vals.append(loss_fn(m, batch))
        numeric.append((vals[0] - vals[1]) / (2 * scale))
        analytic.append(np.sum(grad * d))
    return relative_error(analytic, numeric)


def beta_fd_check(model, batch, loss_fn, grad_fn, step=1e-4):
    vals = []
    for t in (step, -step):
        m = model.copy()
        m.beta = model.beta + t
        vals.append(loss_fn(m, batch))
    return relative_error(grad_fn(model, batch), (vals[0] - vals[1]) / (2 * step))


def small_instance(seed):
    """Random instance inside N <= 10, P <= 4, C <= 3."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 11))
    p = int(rng.integers(1, 5))
    c = int(rng.integers(1, 4))
    model = random_model(rng, n_dim=n, n_hidden=p, n_classes=c,
                         beta=float(rng.uniform(1, 20)), varsigma=float(rng.uniform(0.2, 1)))
    batch = random_dataset(rng, n_dim=n, n_examples=int(rng.integers(3, 30)), n_classes=c)
    return model, batch, rng


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
