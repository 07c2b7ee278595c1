import numpy as np
import pytest

from fluxlab.bend import (
    BendModel,
    BendTrainConfig,
    bend_interpolant,
    bend_tangent,
    gamma,
    path_energy,
    train_bend,
)
from fluxlab.geometry import GeometryTrainConfig, train_geometry
from fluxlab.transport import Coupling, MarginalSequence


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class ConstantMetric:
    """M(x) = c with zero input gradient."""

    def __init__(self, c=1.0):
        self.c = c

    def metric_scalar(self, X):
        return np.full(X.shape[0], self.c)

    def metric_input_grad(self, X):
        return np.zeros_like(X)


def constant_output_bend(dim, value):
    """Bend whose net always outputs ``value`` (bias-only net)."""
    model = BendModel.zero(dim)
    model.net.biases[-1][...] = value
    return model


class TestGamma:
    def test_endpoints_vanish(self):
        assert gamma(0.0) == 0.0 and gamma(1.0) == 0.0

    def test_midpoint_is_one(self):
        assert gamma(0.5) == 1.0


class TestInterpolant:
    def test_endpoint_exactness(self, rng):
        for _ in range(10):
            model = BendModel.init(3, hidden=(8, 8), rng=rng)
            # non-trivial correction: random output layer
            model.net.weights[-1][...] = rng.standard_normal(model.net.weights[-1].shape)
            model.net.biases[-1][...] = rng.standard_normal(model.net.biases[-1].shape)
            x0 = rng.standard_normal((4, 3))
            x1 = rng.standard_normal((4, 3))
            scale = np.abs(x0).max() + np.abs(x1).max()
            assert np.max(np.abs(model.interpolate(x0, x1, 0.0) - x0)) < 1e-12 * scale
            assert np.max(np.abs(model.interpolate(x0, x1, 1.0) - x1)) < 1e-12 * scale

    def test_zero_net_is_straight_line(self, rng):
        model = BendModel.zero(2)
        x0 = rng.standard_normal((3, 2))
        x1 = rng.standard_normal((3, 2))
        for tau in (0.25, 0.5, 0.9):
            want = (1 - tau) * x0 + tau * x1
            assert np.allclose(bend_interpolant(model, x0, x1, tau), want, atol=1e-14)

    def test_midpoint_offset_equals_net_output(self, rng):
        delta = np.array([0.3, -0.7])
        model = constant_output_bend(2, delta)
        x0 = rng.standard_normal((5, 2))
        x1 = rng.standard_normal((5, 2))
        mid = bend_interpolant(model, x0, x1, 0.5)
        assert np.allclose(mid, 0.5 * (x0 + x1) + delta, atol=1e-12)

    def test_tau_out_of_range_rejected(self, rng):
        model = BendModel.zero(2)
        with pytest.raises(ValueError):
            model.interpolate(np.zeros((1, 2)), np.ones((1, 2)), 1.2)


class TestTangent:
    def test_zero_net_gives_displacement(self, rng):
        model = BendModel.zero(3)
        x0 = rng.standard_normal((4, 3))
        x1 = rng.standard_normal((4, 3))
        for tau in (0.0, 0.3, 0.5, 1.0):
            assert np.allclose(bend_tangent(model, x0, x1, tau), x1 - x0, atol=1e-9)

    def test_constant_net_analytic_derivative(self, rng):
        c = np.array([0.5, -1.0])
        model = constant_output_bend(2, c)
        x0 = rng.standard_normal((3, 2))
        x1 = rng.standard_normal((3, 2))
        for tau in (0.2, 0.5, 0.8):
            want = (x1 - x0) + (4.0 - 8.0 * tau) * c
            assert np.allclose(bend_tangent(model, x0, x1, tau), want, atol=1e-8)

    def test_midpoint_constant_net_exact_displacement(self, rng):
        model = constant_output_bend(2, np.array([2.0, 3.0]))
        x0 = rng.standard_normal((3, 2))
        x1 = rng.standard_normal((3, 2))
        assert np.allclose(bend_tangent(model, x0, x1, 0.5), x1 - x0, atol=1e-9)

    def test_euler_integration_of_tangent_reaches_target(self, rng):
        model = BendModel.init(2, hidden=(8, 8), rng=rng)
        x0 = rng.standard_normal((1, 2))
        x1 = rng.standard_normal((1, 2))
        n = 200
        x = model.interpolate(x0, x1, 0.0)
        for i in range(n):
            x = x + bend_tangent(model, x0, x1, i / n) / n
        assert np.linalg.norm(x - x1) < 0.05


class TestPathEnergy:
    def test_identical_endpoints_zero(self, rng):
        model = BendModel.zero(2)
        x = rng.standard_normal((3, 2))
        assert np.allclose(path_energy(model, ConstantMetric(), x, x), 0.0, atol=1e-20)

    def test_straight_line_unit_metric(self, rng):
        model = BendModel.zero(3)
        x0 = rng.standard_normal((5, 3))
        x1 = rng.standard_normal((5, 3))
        want = np.sum((x1 - x0) ** 2, axis=1)
        got = path_energy(model, ConstantMetric(), x0, x1, n_points=8)
        assert np.allclose(got, want, atol=1e-6 * (1 + want.max()))

    def test_bent_path_exceeds_line(self, rng):
        bent = constant_output_bend(2, np.array([1.0, 0.0]))
        line = BendModel.zero(2)
        x0 = rng.standard_normal((4, 2))
        x1 = rng.standard_normal((4, 2))
        e_line = path_energy(line, ConstantMetric(), x0, x1)
        e_bent = path_energy(bent, ConstantMetric(), x0, x1)
        assert np.all(e_bent >= e_line - 1e-12)


def two_marginal_sequence(rng, n=64, d=2, offset=2.0):
    a = rng.standard_normal((n, d)) * 0.3
    b = rng.standard_normal((n, d)) * 0.3 + offset
    return MarginalSequence([a, b])


class TestTrainBend:
    def test_unit_metric_shrinks_correction(self, rng):
        # Start from a net with a random (non-zero) correction; the line is
        # the global minimizer under a constant metric.
        seq = two_marginal_sequence(rng)
        cfg = BendTrainConfig(epochs=40, batch_size=32, lr=3e-3, hidden=(16, 16))
        init_rng = np.random.default_rng(1)
        init_model = BendModel.init(2, hidden=(16, 16), rng=init_rng)
        init_model.net.weights[-1][...] = 0.3 * init_rng.standard_normal(init_model.net.weights[-1].shape)
        frozen_init = init_model.copy()
        nodes = (np.arange(8) + 0.5) / 8
        x0 = seq.samples(0)[:32]
        x1 = seq.samples(1)[:32]

        def mean_correction(model):
            tot = 0.0
            for tau in nodes:
                base = (1 - tau) * x0 + tau * x1
                tot += np.linalg.norm(model.interpolate(x0, x1, tau) - base, axis=1).mean()
            return tot / nodes.size

        trained = train_bend(
            seq, [(0, 1)], ConstantMetric(), cfg, np.random.default_rng(1), init_model=init_model
        )
        assert mean_correction(trained) < mean_correction(frozen_init)

    def test_unit_metric_energy_near_line(self, rng):
        seq = two_marginal_sequence(rng)
        cfg = BendTrainConfig(epochs=60, batch_size=32, lr=1e-3, hidden=(16, 16))
        trained = train_bend(seq, [(0, 1)], ConstantMetric(), cfg, np.random.default_rng(2))
        x0 = seq.samples(0)
        x1 = seq.samples(1)
        line = np.sum((x1 - x0) ** 2, axis=1).mean()
        got = path_energy(trained, ConstantMetric(), x0, x1).mean()
        assert got <= 1.05 * line

    def test_semicircle_manifold_pulls_midpoints(self, rng):
        # Two arcs of a circle; high off-manifold cost should bend the
        # midpoint outward toward the arc compared to the chord.
        theta_a = rng.uniform(0.2, 0.6, 150)
        theta_b = rng.uniform(np.pi - 0.6, np.pi - 0.2, 150)
        pool_theta = rng.uniform(0.0, np.pi, 600)
        to_xy = lambda th: np.stack([np.cos(th), np.sin(th)], axis=1)
        pool = to_xy(pool_theta) + 0.01 * rng.standard_normal((600, 2))
        metric = train_geometry(pool, GeometryTrainConfig(n_centers=60), seed=0)
        seq = MarginalSequence([to_xy(theta_a), to_xy(theta_b)])
        cfg = BendTrainConfig(epochs=60, batch_size=64, lr=3e-3, hidden=(16, 16))
        trained = train_bend(seq, [(0, 1)], metric, cfg, np.random.default_rng(3))
        x0 = seq.samples(0)[:100]
        x1 = seq.samples(1)[:100]
        mid_line = 0.5 * (x0 + x1)
        mid_bend = trained.interpolate(x0, x1, 0.5)
        dist = lambda P: np.abs(np.linalg.norm(P, axis=1) - 1.0).mean()
        assert dist(mid_bend) < dist(mid_line)

    def test_identical_endpoints_energy_zero(self, rng):
        a = rng.standard_normal((40, 2))
        seq = MarginalSequence([a, a.copy()])
        cfg = BendTrainConfig(epochs=10, batch_size=16, lr=1e-3, hidden=(8, 8),
                              coupling=Coupling(kind="index_aligned"))
        trained = train_bend(seq, [(0, 1)], ConstantMetric(), cfg, np.random.default_rng(4))
        e = path_energy(trained, ConstantMetric(), a, a).mean()
        assert e < 1e-3

    def test_loss_curve_non_increasing(self, rng):
        seq = two_marginal_sequence(rng)
        cfg = BendTrainConfig(epochs=15, batch_size=32, lr=1e-3, hidden=(8, 8))
        trained = train_bend(seq, [(0, 1)], ConstantMetric(), cfg, np.random.default_rng(5))
        curve = trained.loss_curve_
        assert all(a >= b - 1e-12 for a, b in zip(curve, curve[1:]))
