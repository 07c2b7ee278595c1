import numpy as np
import pytest

from fluxlab.nn import (
    AdamWState,
    GumbelSchedule,
    Mlp,
    TimeEmbedding,
    adamw_step,
    categorical_entropy,
    gumbel_softmax,
    mlp_forward,
    mlp_gradients,
    sinusoidal_time_embedding,
)


def finite_diff_param_grads(m, x, up, h=1e-5):
    flat = m.flat_params()
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        p = flat.copy()
        p[i] += h
        m.set_flat_params(p)
        lp = up @ m.forward(x[None, :])[0]
        p[i] -= 2 * h
        m.set_flat_params(p)
        lm = up @ m.forward(x[None, :])[0]
        fd[i] = (lp - lm) / (2 * h)
    m.set_flat_params(flat)
    return fd


class TestMlpForward:
    def test_zero_net_maps_to_zero(self):
        m = Mlp.zeros([3, 4, 2])
        assert np.array_equal(mlp_forward(m, np.array([1.0, -2.0, 3.0])), np.zeros(2))

    def test_relu_clamps_negative_identity(self):
        m = Mlp(
            [1, 1, 1],
            [np.array([[1.0]]), np.array([[1.0]])],
            [np.zeros(1), np.zeros(1)],
            activation="relu",
        )
        assert mlp_forward(m, np.array([-2.0]))[0] == 0.0

    def test_hand_evaluated_two_layer(self):
        rng = np.random.default_rng(0)
        W1 = rng.standard_normal((2, 3))
        b1 = rng.standard_normal(3)
        W2 = rng.standard_normal((3, 1))
        b2 = rng.standard_normal(1)
        m = Mlp([2, 3, 1], [W1, W2], [b1, b2], activation="relu")
        x = rng.standard_normal(2)
        expected = np.maximum(x @ W1 + b1, 0.0) @ W2 + b2
        assert np.allclose(mlp_forward(m, x), expected, atol=1e-12)

    def test_dimension_mismatch_raises(self):
        m = Mlp.zeros([3, 2])
        with pytest.raises(ValueError):
            mlp_forward(m, np.zeros(4))

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(1)
        m = Mlp.init([4, 8, 3], rng=rng)
        x = rng.standard_normal((5, 4))
        assert np.array_equal(m.forward(x), m.forward(x))


class TestMlpGradients:
    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(2)
        m = Mlp.init([3, 5, 2], rng=rng)
        grads, dx = mlp_gradients(m, rng.standard_normal(3), np.zeros(2))
        assert all(np.all(g == 0) for g in grads)
        assert np.all(dx == 0)

    def test_linear_net_analytic(self):
        w = 1.7
        b = -0.3
        m = Mlp([1, 1], [np.array([[w]])], [np.array([b])])
        x = np.array([2.5])
        grads, dx = mlp_gradients(m, x, np.array([1.0]))
        assert grads[0][0, 0] == pytest.approx(2.5)
        assert grads[1][0] == pytest.approx(1.0)
        assert dx[0] == pytest.approx(w)

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_matches_finite_differences(self, activation):
        rng = np.random.default_rng(3)
        m = Mlp.init([3, 5, 2], activation=activation, rng=rng)
        x = rng.standard_normal(3)
        up = rng.standard_normal(2)
        grads, _ = mlp_gradients(m, x, up)
        flat = np.concatenate([g.ravel() for g in grads])
        fd = finite_diff_param_grads(m, x, up)
        denom = np.maximum(np.abs(fd), 1e-4)
        assert np.max(np.abs(fd - flat) / denom) < 1e-4

    def test_non_finite_input_rejected(self):
        m = Mlp.zeros([2, 2])
        with pytest.raises(ValueError):
            mlp_gradients(m, np.array([np.nan, 0.0]), np.zeros(2))


class TestAdamW:
    def test_zero_grads_zero_decay_identity(self):
        state = AdamWState(lr=0.1, weight_decay=0.0)
        p = [np.array([1.0, -2.0])]
        before = p[0].copy()
        adamw_step(state, p, [np.zeros(2)])
        assert np.array_equal(p[0], before)
        assert state.step_count == 1

    def test_first_step_magnitude(self):
        state = AdamWState(lr=0.1, beta1=0.9, beta2=0.999, weight_decay=0.0)
        p = [np.array([0.0])]
        adamw_step(state, p, [np.array([1.0])])
        assert p[0][0] == pytest.approx(-0.1, rel=1e-6)

    def test_decoupled_decay_shrinks(self):
        state = AdamWState(lr=0.1, weight_decay=0.01)
        p = [np.array([2.0])]
        adamw_step(state, p, [np.array([0.0])])
        assert p[0][0] == pytest.approx(2.0 * (1.0 - 0.1 * 0.01))

    def test_step_count_increments(self):
        state = AdamWState()
        p = [np.zeros(1)]
        for i in range(3):
            adamw_step(state, p, [np.zeros(1)])
        assert state.step_count == 3


class TestTimeEmbedding:
    def test_t0_sin_components_zero(self):
        e = TimeEmbedding(16)
        emb = sinusoidal_time_embedding(e, 0.0)
        assert np.array_equal(emb[0::2], np.zeros(8))
        assert np.array_equal(emb[1::2], np.ones(8))

    def test_range_bounded(self):
        e = TimeEmbedding(16)
        t = np.linspace(0, 1, 101)
        emb = e.embed(t)
        assert emb.shape == (101, 16)
        assert np.all(emb >= -1.0) and np.all(emb <= 1.0)

    def test_lipschitz_bound(self):
        e = TimeEmbedding(16)
        rng = np.random.default_rng(4)
        for _ in range(50):
            t1 = rng.uniform()
            t2 = np.clip(t1 + rng.uniform(-1e-3, 1e-3), 0, 1)
            diff = np.linalg.norm(e.embed(t1) - e.embed(t2))
            bound = e.max_frequency * 2 * np.pi * abs(t1 - t2) * np.sqrt(e.dim)
            assert diff <= bound + 1e-12

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            TimeEmbedding(7)


class TestGumbelSoftmax:
    def test_hard_mode_is_one_hot(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            w = gumbel_softmax(rng.standard_normal(4), tau=0.5, hard=True, rng=rng)
            assert np.sum(w == 1.0) == 1 and np.sum(w == 0.0) == 3

    def test_soft_mode_on_simplex(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            w = gumbel_softmax(rng.standard_normal(5), tau=0.7, rng=rng)
            assert abs(w.sum() - 1.0) < 1e-6
            assert np.all(w >= 0)

    def test_large_tau_approaches_uniform(self):
        rng = np.random.default_rng(7)
        w = gumbel_softmax(np.array([3.0, -1.0, 0.5]), tau=1e7, rng=rng)
        assert np.allclose(w, 1.0 / 3.0, atol=1e-5)

    def test_equal_logits_hard_frequency(self):
        rng = np.random.default_rng(8)
        n = 100_000
        noise = -np.log(-np.log(np.clip(rng.uniform(size=(n, 2)), 1e-12, 1 - 1e-12)))
        counts = np.bincount(np.argmax(noise, axis=1), minlength=2)
        assert abs(counts[0] / n - 0.5) < 0.01

    def test_non_positive_tau_rejected(self):
        with pytest.raises(ValueError):
            gumbel_softmax(np.zeros(2), tau=0.0, rng=np.random.default_rng(0))


class TestGumbelSchedule:
    def test_temperature_decay_formula(self):
        s = GumbelSchedule(tau_init=1.0, tau_min=0.2, tau_decay=0.9, soft_epochs=3)
        assert s.tau_at(0) == 1.0
        assert s.tau_at(2) == pytest.approx(0.81)
        assert s.tau_at(1000) == 0.2

    def test_soft_epochs_disable_hard(self):
        s = GumbelSchedule(soft_epochs=3)
        assert not s.hard_at(0) and not s.hard_at(2)
        assert s.hard_at(3)


class TestCategoricalEntropy:
    def test_one_hot_is_near_zero(self):
        assert categorical_entropy(np.array([1.0, 0.0, 0.0])) < 1e-10

    def test_uniform_two(self):
        assert categorical_entropy(np.array([0.5, 0.5])) == pytest.approx(np.log(2), abs=1e-9)

    def test_nine_one(self):
        assert categorical_entropy(np.array([0.9, 0.1])) == pytest.approx(0.3251, abs=1e-4)

    def test_off_simplex_rejected(self):
        with pytest.raises(ValueError):
            categorical_entropy(np.array([0.9, 0.2]))
