import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import i0, i1

from conftest import (
    beta_fd_check,
    class_weight_fd_check,
    cluster_dataset,
    memory_fd_check,
    random_dataset,
    random_model,
    small_instance,
)
from dam.errors import DomainError
from dam.model import DamModel, LabeledDataset, effective_gradients, effective_loss
from dam.numerics import make_rng, sample_uniform_sphere
from dam.polytope import TransportMatrix, class_gradient_projection
from dam.training import (
    BETA_FLOOR,
    OptimizerState,
    TrainConfig,
    class_rate_divisor,
    decreasing_class_marginal,
    evaluate,
    grad_beta,
    grad_class_weights,
    grad_memories,
    init_model,
    initial_class_weights,
    sgd_epoch,
    train_supervised,
    train_unsupervised,
)


def two_cluster_data(rng, n_dim=10, kappa=30.0, per_cluster=100):
    e1 = np.eye(n_dim)[0]
    return cluster_dataset(rng, np.stack([e1, -e1]), kappa, per_cluster)


def plain_projected_descent(model, data, learn_rate, steps):
    """Full-batch projected gradient descent written out without the training module."""
    m = model.copy()
    for _ in range(steps):
        g = effective_gradients(m, data)
        w = m.memories - learn_rate * g.memories
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        p = m.class_weights
        rows, cols = p.row_marginals, p.col_marginals
        row_mean = (g.class_weights * p.entries).sum(axis=1) / rows
        proj = np.where(p.entries > 0, g.class_weights - row_mean[:, None], 0.0)
        h0 = rows[0]
        rate = learn_rate / ((1 + h0 / (1 - h0)) * m.n_hidden)
        k = p.entries * np.exp(-rate * proj)
        for _ in range(100_000):
            k *= (rows / k.sum(axis=1))[:, None]
            k *= (cols / k.sum(axis=0))[None, :]
            if np.max(np.abs(k.sum(axis=1) - rows)) < 1e-15:
                break
        m = DamModel(w, TransportMatrix(k, rows, cols), m.beta, m.varsigma)
    return m


class TestGradients:
    @pytest.mark.parametrize("seed", range(10))
    def test_memory_gradient_finite_difference(self, seed):
        model, batch, rng = small_instance(seed)
        assert memory_fd_check(model, batch, effective_loss, grad_memories, rng) < 1e-5

    def test_memory_gradient_spec_instance(self):
        rng = np.random.default_rng(42)
        model = random_model(rng, n_dim=7, n_hidden=3, n_classes=2, beta=3.0, varsigma=0.5)
        batch = random_dataset(rng, n_dim=7, n_examples=15, n_classes=2)
        assert memory_fd_check(model, batch, effective_loss, grad_memories, rng, n_dirs=20) < 1e-5

    @pytest.mark.parametrize("seed", range(10))
    def test_class_weight_gradient_finite_difference(self, seed):
        model, batch, _ = small_instance(seed)
        assert class_weight_fd_check(model, batch, effective_loss, grad_class_weights) < 1e-5

    @pytest.mark.parametrize("beta", [2.0, 8.0, 20.0])
    def test_beta_gradient_finite_difference(self, beta):
        rng = np.random.default_rng(42)
        model = random_model(rng, n_dim=6, n_hidden=3, n_classes=2, beta=beta, varsigma=0.7)
        batch = random_dataset(rng, n_dim=6, n_examples=12, n_classes=2)
        assert beta_fd_check(model, batch, effective_loss, grad_beta) < 1e-5

    def test_memory_gradient_tangent(self):
        model, batch, _ = small_instance(3)
        g = grad_memories(model, batch)
        np.testing.assert_allclose(np.sum(g * model.memories, axis=1), 0.0, atol=1e-10)

    def test_memory_gradient_vanishes_on_own_cluster(self):
        rng = np.random.default_rng(42)
        memories = sample_uniform_sphere(8, rng, size=2)
        entries = np.array([[0.02, 0.0, 0.0], [0.0, 0.49, 0.0], [0.0, 0.0, 0.49]])
        weights = TransportMatrix(entries, entries.sum(axis=1), entries.sum(axis=0))
        model = DamModel(memories, weights, beta=500.0)
        labels = np.array([[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
        batch = LabeledDataset(np.stack([memories[0], memories[0]]), labels)
        assert np.linalg.norm(grad_memories(model, batch)[0]) < 1e-10

    def test_class_gradient_single_class_batch(self):
        rng = np.random.default_rng(42)
        model = random_model(rng, n_classes=3)
        labels = np.zeros((6, 4))
        labels[:, 2] = 1.0
        batch = LabeledDataset(sample_uniform_sphere(5, rng, size=6), labels)
        g = grad_class_weights(model, batch)
        assert np.all(g[:, [0, 1, 3]] == 0.0)
        assert np.all(g[:, 2] < 0.0)

    def test_fully_constrained_polytope(self):
        rng = np.random.default_rng(42)
        rows = np.array([0.3, 0.7])
        cols = np.array([0.0, 1.0])
        weights = TransportMatrix(np.outer(rows, cols), rows, cols)
        model = DamModel(sample_uniform_sphere(5, rng, size=1), weights, beta=4.0)
        labels = np.tile([0.0, 1.0], (5, 1))
        batch = LabeledDataset(sample_uniform_sphere(5, rng, size=5), labels)
        projected = class_gradient_projection(grad_class_weights(model, batch), model.class_weights)
        np.testing.assert_allclose(projected, 0.0, atol=1e-12)

    def test_beta_gradient_sign_at_sharp_fit(self):
        memories = np.eye(6)[:2]
        entries = np.array([[0.02, 0.0, 0.0], [0.0, 0.49, 0.0], [0.0, 0.0, 0.49]])
        weights = TransportMatrix(entries, entries.sum(axis=1), entries.sum(axis=0))
        batch = LabeledDataset(memories, np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
        grads = []
        for beta in (20.0, 80.0):
            model = DamModel(memories, weights, beta)
            g = grad_beta(model, batch)
            h = 1e-4
            up = DamModel(memories, weights, beta + h)
            down = DamModel(memories, weights, beta - h)
            fd = (effective_loss(up, batch) - effective_loss(down, batch)) / (2 * h)
            assert g < 0 and fd < 0
            assert g == pytest.approx(fd, rel=1e-5)
            grads.append(abs(g))
        assert grads[1] < grads[0]

    def test_beta_gradient_circle_closed_form(self):
        # N = 2, P = 1: Omega(b) = 2 pi I0(b), d log Omega / db = I1(b) / I0(b)
        theta = np.array([1.0, 0.0])
        rows = np.array([0.25, 0.75])
        cols = np.array([0.4, 0.6])
        entries = np.array([[0.1, 0.15], [0.3, 0.45]])
        model = DamModel(theta[None, :], TransportMatrix(entries, rows, cols), beta=2.5)
        angles = np.array([0.3, 2.0, -1.1])
        x = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        labels = np.array([[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]])
        batch = LabeledDataset(x, labels)
        b = model.beta
        c = x @ theta
        expected = 0.0
        for k in range(3):
            for y in range(2):
                term = entries[1, y] * np.exp(b * c[k]) / (2 * np.pi * i0(b))
                joint = term + entries[0, y] / (2 * np.pi)
                expected -= labels[k, y] * term * (c[k] - i1(b) / i0(b)) / joint
        expected /= 3
        assert grad_beta(model, batch) == pytest.approx(expected, rel=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_all_gradients_match_finite_differences(seed):
    model, batch, rng = small_instance(seed)
    assert memory_fd_check(model, batch, effective_loss, grad_memories, rng, n_dirs=5) < 1e-5
    assert class_weight_fd_check(model, batch, effective_loss, grad_class_weights) < 1e-5
    assert beta_fd_check(model, batch, effective_loss, grad_beta) < 1e-5


class TestInitialization:
    def test_class_weights_layout(self):
        q = np.array([0.0, 0.3, 0.7])
        p = initial_class_weights(4, q, p0=2.0)
        np.testing.assert_allclose(p.row_marginals, [2 / 6, 1 / 6, 1 / 6, 1 / 6, 1 / 6])
        np.testing.assert_allclose(p.entries, np.outer(p.row_marginals, q))
        assert p.is_feasible()

    def test_decreasing_ramp(self):
        np.testing.assert_allclose(decreasing_class_marginal(3), [4 / 10, 3 / 10, 2 / 10, 1 / 10])

    def test_rate_divisor(self):
        p = initial_class_weights(9, np.array([0.5, 0.5]), p0=1.0)
        model = DamModel(np.eye(10)[:9], p, 1.0)
        # h0 = 1/10 so the factor is (1 + 1/9) * 9 = 10 = P + P0
        assert class_rate_divisor(model) == pytest.approx(10.0)

    def test_config_validation(self):
        with pytest.raises(DomainError):
            TrainConfig(momentum=1.0).validate()
        with pytest.raises(DomainError):
            TrainConfig(batch_size=0).validate()


class TestSgdEpoch:
    def test_zero_rate_leaves_model_bitwise(self):
        rng = np.random.default_rng(42)
        data = two_cluster_data(rng)
        model = init_model(2, 10, data.soft_labels.mean(axis=0), rng)
        before = model.copy()
        cfg = TrainConfig(n_hidden=2, learn_rate=0.0, train_beta=True)
        metrics = sgd_epoch(model, data, cfg, OptimizerState.zeros_like(model), rng)
        assert np.array_equal(model.memories, before.memories)
        assert np.array_equal(model.class_weights.entries, before.class_weights.entries)
        assert model.beta == before.beta
        assert math.isfinite(metrics.loss) and 0.0 <= metrics.accuracy <= 1.0

    def test_determinism(self):
        data = two_cluster_data(np.random.default_rng(42))
        cfg = TrainConfig(n_hidden=3, epochs=3, batch_size=16, train_beta=True, varsigma=0.5, seed=7)
        a, ha = train_supervised(data, cfg)
        b, hb = train_supervised(data, cfg)
        assert np.array_equal(a.memories, b.memories)
        assert np.array_equal(a.class_weights.entries, b.class_weights.entries)
        assert a.beta == b.beta and ha.losses == hb.losses

    def test_invariants_after_each_epoch(self):
        rng = np.random.default_rng(42)
        data = two_cluster_data(rng)
        model = init_model(4, 10, data.soft_labels.mean(axis=0), rng, beta=0.01)
        opt = OptimizerState.zeros_like(model)
        cfg = TrainConfig(n_hidden=4, learn_rate=0.5, batch_size=20, train_beta=True)
        for _ in range(5):
            sgd_epoch(model, data, cfg, opt, rng)
            np.testing.assert_allclose(np.linalg.norm(model.memories, axis=1), 1.0, atol=1e-10)
            assert model.class_weights.is_feasible(1e-8)
            assert model.beta >= BETA_FLOOR

    def test_loss_decreases_on_planted_toy(self):
        rng = np.random.default_rng(42)
        centers = sample_uniform_sphere(5, rng, size=2)
        data = cluster_dataset(rng, centers, 20.0, 100)
        model = init_model(2, 5, data.soft_labels.mean(axis=0), rng, beta=5.0)
        opt = OptimizerState.zeros_like(model)
        cfg = TrainConfig(n_hidden=2, learn_rate=0.01, batch_size=20)
        losses = [effective_loss(model, data)]
        for _ in range(10):
            sgd_epoch(model, data, cfg, opt, rng)
            losses.append(effective_loss(model, data))
        assert np.all(np.diff(losses) < 0)

    def test_matches_plain_projected_descent(self):
        rng = np.random.default_rng(42)
        data = random_dataset(rng, n_dim=6, n_examples=20, n_classes=2)
        model = random_model(rng, n_dim=6, n_hidden=3, n_classes=2, beta=4.0, varsigma=0.8)
        cfg = TrainConfig(n_hidden=3, learn_rate=0.1, momentum=0.0, batch_size=20, epochs=5, sinkhorn_tol=1e-15)
        trained, _ = train_supervised(data, cfg, init=model)
        expected = plain_projected_descent(model, data, 0.1, 5)
        assert np.max(np.abs(trained.memories - expected.memories)) < 1e-12
        assert np.max(np.abs(trained.class_weights.entries - expected.class_weights.entries)) < 1e-12

    def test_small_full_batch_step_descends(self):
        rng = np.random.default_rng(42)
        data = random_dataset(rng, n_dim=5, n_examples=8, n_classes=2)
        model = random_model(rng, n_dim=5, n_hidden=2, n_classes=2, beta=3.0, varsigma=0.7)
        before = effective_loss(model, data)
        rate = 0.5
        while rate > 1e-8:
            cfg = TrainConfig(n_hidden=2, learn_rate=rate, momentum=0.0, batch_size=8, epochs=1)
            stepped, _ = train_supervised(data, cfg, init=model)
            if effective_loss(stepped, data) <= before:
                break
            rate *= 0.5
        assert effective_loss(stepped, data) <= before


class TestLoops:
    def test_supervised_two_clusters(self):
        data = two_cluster_data(np.random.default_rng(42))
        cfg = TrainConfig(n_hidden=2, epochs=50, batch_size=20, seed=0)
        model, history = train_supervised(data, cfg)
        assert max(history.accuracies) >= 0.99
        assert evaluate(model, data).accuracy >= 0.99

    def test_unsupervised_full_smoothing_is_uniform_supervised(self):
        rng = np.random.default_rng(42)
        data = two_cluster_data(rng)
        init = init_model(2, 10, decreasing_class_marginal(2), rng)
        cfg = TrainConfig(n_hidden=2, epochs=3, batch_size=25, seed=3, n_classes=2)
        uniform = LabeledDataset(data.inputs, np.full((len(data), 3), 1 / 3))
        a, _ = train_unsupervised(data.inputs, cfg, eps=1.0, init=init)
        b, _ = train_supervised(uniform, cfg, init=init)
        assert np.array_equal(a.memories, b.memories)
        assert np.array_equal(a.class_weights.entries, b.class_weights.entries)

    def test_unsupervised_separates_clusters(self):
        separated = 0
        for seed in range(10):
            data = two_cluster_data(np.random.default_rng(seed))
            cfg = TrainConfig(n_hidden=2, epochs=30, batch_size=20, beta=10.0, seed=seed, n_classes=1)
            model, _ = train_unsupervised(data.inputs, cfg, eps=0.1)
            memory_class = np.argmax(model.class_weights.entries[1:], axis=1)
            separated += memory_class[0] != memory_class[1]
        assert separated >= 9

    def test_zero_smoothing_leaves_class_weights(self):
        # With the posterior held fixed, -sum_y pi_y grad log P(x, y) reduces to the
        # gradient of the marginal density, which does not depend on how a slot's
        # mass is split across classes.
        data = two_cluster_data(np.random.default_rng(42))
        cfg = TrainConfig(n_hidden=2, epochs=5, batch_size=20, seed=1, n_classes=1)
        init = init_model(2, 10, decreasing_class_marginal(1), make_rng(1))
        model, _ = train_unsupervised(data.inputs, cfg, eps=0.0, init=init)
        np.testing.assert_allclose(model.class_weights.entries, init.class_weights.entries, atol=1e-9)
        assert not np.allclose(model.memories, init.memories)

    def test_unsupervised_needs_class_count(self):
        with pytest.raises(DomainError):
            train_unsupervised(np.eye(3), TrainConfig(n_hidden=2), eps=0.1)


class TestEvaluate:
    def test_perfect_model_on_memories(self):
        memories = np.eye(4)[:3]
        entries = np.diag([0.1, 0.3, 0.3, 0.3])
        model = DamModel(memories, TransportMatrix(entries, entries.sum(axis=1), entries.sum(axis=0)), 100.0)
        labels = np.eye(4)[1:]
        metrics = evaluate(model, LabeledDataset(memories, labels))
        assert metrics.accuracy == 1.0
        assert metrics.fidelity[0] == 1.0

    def test_zero_coupling_predicts_majority(self):
        rng = np.random.default_rng(42)
        model = random_model(rng, n_classes=3, beta=0.0)
        data = random_dataset(rng, n_examples=50, n_classes=3, hard=True)
        majority = np.argmax(model.class_weights.col_marginals)
        assert evaluate(model, data).accuracy == pytest.approx(np.mean(data.hard_labels == majority))
