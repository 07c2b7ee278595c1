import itertools
from math import comb

import numpy as np
import pytest

from fluxlab.evaluate import (
    ari,
    clustering_regime_metrics,
    coordwise_w1,
    gaussian_baseline,
    gating_entropy,
    gmm_em,
    linear_interp_baseline,
    nmi,
    segment_majority,
    sliced_w1,
    static_ot_map,
    switch_rate,
    wasserstein_1d,
    wd_suite,
)
from fluxlab.transport import MarginalSequence
from fluxlab.velocity import MixtureVelocityModel


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def brute_force_w1(a, b):
    """Exact 1D W1 via the quantile-function integral on a fine grid of
    common-refinement levels (independent of the sorting shortcut)."""
    a = np.sort(a)
    b = np.sort(b)
    n, m = len(a), len(b)
    levels = sorted(set([i / n for i in range(1, n + 1)] + [j / m for j in range(1, m + 1)]))
    total = 0.0
    prev = 0.0
    for q in levels:
        ia = int(np.ceil(q * n - 1e-12)) - 1
        ib = int(np.ceil(q * m - 1e-12)) - 1
        total += (q - prev) * abs(a[ia] - b[ib])
        prev = q
    return total


def brute_force_ari(true, pred):
    n = len(true)
    a = sum(
        1
        for i, j in itertools.combinations(range(n), 2)
        if (true[i] == true[j]) and (pred[i] == pred[j])
    )
    b = sum(
        1
        for i, j in itertools.combinations(range(n), 2)
        if (true[i] != true[j]) and (pred[i] != pred[j])
    )
    pairs = comb(n, 2)
    sum_rows = sum(comb(c, 2) for c in np.bincount(np.unique(true, return_inverse=True)[1]))
    sum_cols = sum(comb(c, 2) for c in np.bincount(np.unique(pred, return_inverse=True)[1]))
    expected = sum_rows * sum_cols / pairs
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return None
    agreements = a  # pairs together in both
    return (agreements - expected) / (max_index - expected)


class TestWasserstein1D:
    def test_identical_sets_zero(self, rng):
        x = rng.standard_normal(40)
        assert wasserstein_1d(x, x.copy()) == 0.0

    def test_point_masses(self):
        assert wasserstein_1d([0.0], [2.5]) == pytest.approx(2.5)

    def test_matches_brute_force_unequal_sizes(self, rng):
        for _ in range(20):
            a = rng.standard_normal(rng.integers(2, 30))
            b = rng.standard_normal(rng.integers(2, 30))
            assert wasserstein_1d(a, b) == pytest.approx(brute_force_w1(a, b), abs=1e-10)


class TestSlicedW1:
    def test_identical_sets_zero(self, rng):
        A = rng.standard_normal((30, 4))
        assert sliced_w1(A, A.copy(), 16, rng) == pytest.approx(0.0, abs=1e-14)

    def test_matches_per_direction_sorting_oracle(self, rng):
        A = rng.standard_normal((25, 2))
        B = rng.standard_normal((25, 2)) + 1.0
        dirs_rng = np.random.default_rng(7)
        got = sliced_w1(A, B, 8, np.random.default_rng(7))
        dirs = dirs_rng.standard_normal((8, 2))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        manual = np.mean(
            [np.mean(np.abs(np.sort(A @ d) - np.sort(B @ d))) for d in dirs]
        )
        assert got == pytest.approx(manual, abs=1e-12)

    def test_symmetry(self, rng):
        A = rng.standard_normal((20, 3))
        B = rng.standard_normal((28, 3)) + 0.5
        ab = sliced_w1(A, B, 64, np.random.default_rng(1))
        ba = sliced_w1(B, A, 64, np.random.default_rng(1))
        assert ab == pytest.approx(ba, abs=1e-12)

    def test_triangle_inequality_within_noise(self, rng):
        for seed in range(5):
            r = np.random.default_rng(seed)
            A = r.standard_normal((30, 2))
            B = r.standard_normal((30, 2)) + 1.0
            C = r.standard_normal((30, 2)) - 1.0
            proj = np.random.default_rng(99)
            ab = sliced_w1(A, B, 256, np.random.default_rng(99))
            bc = sliced_w1(B, C, 256, np.random.default_rng(99))
            ac = sliced_w1(A, C, 256, np.random.default_rng(99))
            assert ac <= ab + bc + 1e-9

    def test_dimension_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            sliced_w1(np.zeros((3, 2)), np.zeros((3, 3)), 4, rng)


class TestSegmentMajority:
    def test_constant_assignments(self):
        segs, major = segment_majority([1, 1, 1, 1], [0, 0, 1, 1])
        assert major == [1, 1]

    def test_majority_vote(self):
        segs, major = segment_majority([0, 0, 1], [7, 7, 7])
        assert segs == [7] and major == [0]

    def test_tie_breaks_to_smaller_label(self):
        _, major = segment_majority([0, 1], [3, 3])
        assert major == [0]


class TestAri:
    def test_identical_labelings(self):
        assert ari([0, 0, 1, 1], [0, 0, 1, 1]) == pytest.approx(1.0)

    def test_permutation_invariance(self):
        assert ari([0, 0, 1, 1, 2], [2, 2, 0, 0, 1]) == pytest.approx(1.0)

    def test_crossed_pairs_value(self):
        got = ari([0, 0, 1, 1], [0, 1, 0, 1])
        want = brute_force_ari([0, 0, 1, 1], [0, 1, 0, 1])
        assert want is not None and got == pytest.approx(want, abs=1e-12)
        assert got <= 0.0

    def test_matches_brute_force_random_instances(self, rng):
        checked = 0
        while checked < 25:
            n = int(rng.integers(4, 12))
            true = rng.integers(0, 3, n)
            pred = rng.integers(0, 3, n)
            want = brute_force_ari(true.tolist(), pred.tolist())
            if want is None:
                continue
            assert ari(true, pred) == pytest.approx(want, abs=1e-10)
            checked += 1

    def test_degenerate_both_constant(self):
        assert ari([0, 0, 0], [1, 1, 1]) == 1.0

    def test_degenerate_one_constant(self):
        assert ari([0, 1, 0, 1], [2, 2, 2, 2]) == 0.0


class TestNmi:
    def test_identical_non_constant(self):
        assert nmi([0, 1, 0, 1], [1, 0, 1, 0]) == pytest.approx(1.0)

    def test_independent_labels_near_zero(self, rng):
        true = rng.integers(0, 2, 4000)
        pred = rng.integers(0, 2, 4000)
        assert nmi(true, pred) < 0.01

    def test_matches_direct_summation(self, rng):
        for _ in range(25):
            n = int(rng.integers(4, 15))
            true = rng.integers(0, 3, n)
            pred = rng.integers(0, 3, n)
            table = np.zeros((3, 3))
            for a, b in zip(true, pred):
                table[a, b] += 1
            p_ab = table / n
            p_a = p_ab.sum(axis=1)
            p_b = p_ab.sum(axis=0)
            info = 0.0
            for a in range(3):
                for b in range(3):
                    if p_ab[a, b] > 0:
                        info += p_ab[a, b] * np.log(p_ab[a, b] / (p_a[a] * p_b[b]))
            h_a = -sum(p * np.log(p) for p in p_a if p > 0)
            h_b = -sum(p * np.log(p) for p in p_b if p > 0)
            if h_a + h_b == 0:
                continue
            want = min(max(2 * info / (h_a + h_b), 0.0), 1.0)
            assert nmi(true, pred) == pytest.approx(want, abs=1e-10)

    def test_range(self, rng):
        for _ in range(10):
            v = nmi(rng.integers(0, 3, 20), rng.integers(0, 4, 20))
            assert 0.0 <= v <= 1.0


class TestSwitchRateGating:
    def test_constant_zero(self):
        assert switch_rate([1, 1, 1, 1]) == 0.0

    def test_alternating_one(self):
        assert switch_rate([0, 1, 0, 1]) == 1.0

    def test_single_change(self):
        assert switch_rate([0, 0, 1, 1, 1]) == pytest.approx(0.25)

    def test_gating_entropy_one_hot(self):
        assert gating_entropy(np.tile([1.0, 0.0], (5, 1))) < 1e-10

    def test_gating_entropy_uniform_three(self):
        assert gating_entropy(np.tile([1 / 3] * 3, (4, 1))) == pytest.approx(np.log(3), abs=1e-9)

    def test_gating_entropy_is_mean_of_rows(self, rng):
        from fluxlab.nn import categorical_entropy

        W = rng.dirichlet(np.ones(3), size=9)
        want = np.mean([categorical_entropy(w) for w in W])
        assert gating_entropy(W) == pytest.approx(want, abs=1e-12)


class TestGmm:
    def test_separated_blobs_recovered(self, rng):
        a = rng.standard_normal((80, 2)) * 0.2 + [8.0, 0.0]
        b = rng.standard_normal((80, 2)) * 0.2 - [8.0, 0.0]
        X = np.vstack([a, b])
        truth = np.array([0] * 80 + [1] * 80)
        res = gmm_em(X, 2, rng=rng)
        assert ari(truth, res.labels) == pytest.approx(1.0)

    def test_k1_matches_sample_moments(self, rng):
        X = rng.standard_normal((200, 3)) * [1.0, 2.0, 0.5] + [1.0, -1.0, 0.0]
        res = gmm_em(X, 1, rng=rng)
        assert np.allclose(res.means[0], X.mean(axis=0), atol=1e-8)
        diff = X - X.mean(axis=0)
        want_cov = diff.T @ diff / X.shape[0]
        assert np.allclose(res.covariances[0], want_cov, atol=1e-4)

    def test_log_likelihood_monotone(self, rng):
        X = np.vstack(
            [rng.standard_normal((60, 2)) + 3, rng.standard_normal((60, 2)) - 3]
        )
        res = gmm_em(X, 2, rng=rng)
        lls = res.log_likelihoods
        assert all(b >= a - 1e-9 for a, b in zip(lls, lls[1:]))


class TestBaselines:
    def test_gaussian_fit_mean_matches(self, rng):
        seq = MarginalSequence([rng.standard_normal((400, 2)), rng.standard_normal((400, 2)) + 3])
        gen = gaussian_baseline(seq, rng)
        assert np.allclose(gen[1].mean(axis=0), seq.samples(1).mean(axis=0), atol=0.3)

    def test_gaussian_moments_match(self, rng):
        X = rng.standard_normal((2000, 2)) @ np.array([[1.0, 0.4], [0.0, 0.8]])
        seq = MarginalSequence([X, X + 1])
        gen = gaussian_baseline(seq, rng)
        want_cov = np.cov(X.T, bias=True)
        got_cov = np.cov(gen[0].T, bias=True)
        assert np.allclose(got_cov, want_cov, atol=0.15)

    def test_linear_interp_endpoints(self, rng):
        A = rng.standard_normal((50, 2))
        B = rng.standard_normal((50, 2)) + 5
        start = linear_interp_baseline((A, B), np.random.default_rng(1), alpha=0.0)
        end = linear_interp_baseline((A, B), np.random.default_rng(1), alpha=1.0)
        assert all(tuple(p) in {tuple(a) for a in A} for p in start)
        assert all(tuple(p) in {tuple(b) for b in B} for p in end)

    def test_linear_midpoint_of_identical_matched_sets(self, rng):
        A = rng.standard_normal((30, 2))
        from fluxlab.transport import Coupling

        mid = linear_interp_baseline(
            (A, A), rng, alpha=0.5, n=30, coupling=Coupling(kind="index_aligned")
        )
        assert all(tuple(p) in {tuple(a) for a in A} for p in mid)

    def test_static_ot_map_moves_mass_toward_target(self, rng):
        A = rng.standard_normal((40, 2))
        B = rng.standard_normal((40, 2)) + 4
        mapped = static_ot_map(A, B, epsilon=0.1)
        assert np.linalg.norm(mapped.mean(axis=0) - B.mean(axis=0)) < 1.0


class ZeroVelocityModel:
    """Minimal stand-in implementing the chain-field protocol."""

    def __init__(self, times, K=1):
        self.time_knots_ = np.asarray(times)
        self.time_mode = "global"
        self.source_conditioning = False
        self.n_experts = K

    def velocity(self, t, X, source=None, mode="deterministic"):
        return np.zeros_like(X)


class ConstantVelocityModel(ZeroVelocityModel):
    def __init__(self, times, c):
        super().__init__(times)
        self.c = np.asarray(c)

    def velocity(self, t, X, source=None, mode="deterministic"):
        # local tangent: displacement per unit pair time
        return np.tile(self.c, (X.shape[0], 1))


class TestWdSuite:
    def test_zero_velocity_identical_marginals(self, rng):
        X = rng.standard_normal((60, 2))
        seq = MarginalSequence([X.copy() for _ in range(3)])
        model = ZeroVelocityModel(seq.times)
        out = wd_suite(model, seq, n_steps=10, n_projections=32, seed=0)
        assert out["wd1"] == pytest.approx(0.0, abs=1e-12)
        assert out["wd2"] == pytest.approx(0.0, abs=1e-12)
        assert out["wd_fc"] == pytest.approx(0.0, abs=1e-12)

    def test_two_marginals_wd2_absent(self, rng):
        X = rng.standard_normal((30, 2))
        seq = MarginalSequence([X, X + 1])
        model = ZeroVelocityModel(seq.times)
        out = wd_suite(model, seq, n_steps=5, n_projections=16, seed=0)
        assert out["wd2"] is None

    def test_translation_chain_exact_field(self, rng):
        c = np.array([1.0, -0.5])
        X = rng.standard_normal((200, 2))
        seq = MarginalSequence([X + k * c for k in range(3)])
        model = ConstantVelocityModel(seq.times, c)
        out = wd_suite(model, seq, n_steps=50, n_projections=64, seed=0)
        base = sliced_w1(X, X[rng.permutation(200)], 64, np.random.default_rng(0))
        # exact transport: all three metrics at Monte-Carlo noise level
        tol = max(2 * base, 0.05)
        assert out["wd1"] < tol and out["wd2"] < tol and out["wd_fc"] < tol


class TestClusteringBaselines:
    def test_separable_stages_recovered(self, rng):
        m = [rng.standard_normal((60, 2)) * 0.1 + [c, 0.0] for c in (0.0, 0.0, 8.0, 8.0)]
        seq = MarginalSequence(m, regime_labels=[0, 0, 1, 1])
        out = clustering_regime_metrics(seq, method="kmeans", k=2, seed=0)
        assert out["seg_ari"] == pytest.approx(1.0)
        out = clustering_regime_metrics(seq, method="gmm", k=2, seed=0)
        assert out["seg_ari"] == pytest.approx(1.0)

    def test_requires_labels(self, rng):
        seq = MarginalSequence([rng.standard_normal((10, 2)), rng.standard_normal((10, 2))])
        with pytest.raises(ValueError):
            clustering_regime_metrics(seq)


class TestCoordwiseW1:
    def test_identical_zero(self, rng):
        A = rng.standard_normal((20, 3))
        assert coordwise_w1(A, A.copy()) == 0.0

    def test_translation(self, rng):
        A = rng.standard_normal((50, 3))
        assert coordwise_w1(A, A + [1.0, 0.0, 0.0]) == pytest.approx(1.0 / 3.0, abs=1e-9)
