"""Transport and regime-discovery metrics plus the non-ODE baselines.

Sliced W1 averages exact one-dimensional Wasserstein distances over random
unit projections (quantile-aligned for unequal sample counts).  Regime
metrics compare per-segment majority labels: contingency ARI, NMI, switch
rate, and gating entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .nn import categorical_entropy
from .transport import Coupling, MarginalSequence, couple, pushforward_chain, sinkhorn_plan
from .validation import as_matrix, check_positive
from .geometry import kmeans

__all__ = [
    "EvalReport",
    "SegmentLabels",
    "wasserstein_1d",
    "sliced_w1",
    "coordwise_w1",
    "wd_suite",
    "segment_majority",
    "ari",
    "nmi",
    "switch_rate",
    "gating_entropy",
    "gmm_em",
    "gaussian_baseline",
    "linear_interp_baseline",
    "static_ot_map",
    "regime_report",
    "clustering_regime_metrics",
]

N_PROJECTION_SEEDS = 5


@dataclass
class EvalReport:
    """Metrics for one trained model / baseline on one dataset."""

    wd1: float = None
    wd2: float = None
    wd_fc: float = None
    wd1_std: float = None
    wd2_std: float = None
    wd_fc_std: float = None
    per_marginal_wd: list = None
    seg_ari: float = None
    seg_nmi: float = None
    gating_entropy: float = None
    switch_rate: float = None
    majority_usage: float = None
    held_out_wd: float = None
    training_wd: float = None
    all_wd: float = None
    surface_dev: float = None
    diverged: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class SegmentLabels:
    """Per-segment majority labels, ordered by segment."""

    segments: list
    true_labels: list
    pred_labels: list


def wasserstein_1d(a, b):
    """Exact W1 between two 1D empirical distributions.

    Equal sizes reduce to the mean absolute difference of sorted samples;
    otherwise the quantile functions are compared on their common
    refinement (exact for piecewise-constant quantiles).
    """
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        raise ValueError("empty sample set")
    if n == m:
        return float(np.mean(np.abs(a - b)))
    t = np.arange(n * m)
    return float(np.mean(np.abs(a[t // m] - b[t // n])))


def sliced_w1(A, B, n_projections=128, rng=None):
    """Mean 1D W1 over random unit directions."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    if A.shape[1] != B.shape[1]:
        raise ValueError("A and B must share dimension")
    check_positive(n_projections, "n_projections")
    rng = rng if rng is not None else np.random.default_rng(0)
    dirs = rng.standard_normal((int(n_projections), A.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(A @ dirs.T, axis=0)
    pb = np.sort(B @ dirs.T, axis=0)
    n, m = pa.shape[0], pb.shape[0]
    if n == m:
        return float(np.mean(np.abs(pa - pb)))
    t = np.arange(n * m)
    total = 0.0
    for j in range(pa.shape[1]):
        total += np.mean(np.abs(pa[t // m, j] - pb[t // n, j]))
    return float(total / pa.shape[1])


def coordwise_w1(A, B):
    """Mean over coordinates of exact 1D W1 (mesh-benchmark metric)."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    return float(np.mean([wasserstein_1d(A[:, r], B[:, r]) for r in range(A.shape[1])]))


def model_chain_field(model):
    """Adapter giving the local-tangent field of a trained velocity model
    for chain integration (deterministic routing; local-time models are
    fed the within-knot interpolation fraction)."""
    knots = model.time_knots_

    def field(t, X, src):
        tt = t
        if model.time_mode == "local":
            j = int(np.searchsorted(knots, t + 1e-12) - 1)
            j = min(max(j, 0), knots.shape[0] - 2)
            tt = (t - knots[j]) / (knots[j + 1] - knots[j])
        return model.velocity(tt, X, source=src if model.source_conditioning else None, mode="deterministic")

    return field


def _multi_seed_w1(gen_target_pairs, n_projections, seed):
    """Headline value at the fixed seed plus std across projection seeds."""
    if not gen_target_pairs:
        return None, None
    values = []
    for s in range(N_PROJECTION_SEEDS):
        rng = np.random.default_rng(seed + s)
        vals = [sliced_w1(g, t, n_projections, rng) for g, t in gen_target_pairs]
        values.append(float(np.mean(vals)))
    return values[0], float(np.std(values))


def wd_suite(model, seq: MarginalSequence, n_steps=100, n_projections=128, seed=0):
    """WD1 / WD2 / WDfc of an ODE-backed model on a marginal sequence.

    WD1 pushes each marginal one hop forward, WD2 two hops over
    (i, i+2), and WDfc integrates the first marginal to the final time.
    Also returns the per-marginal WD of the full chain.
    """
    field = model_chain_field(model)
    knots = model.time_knots_ if model.time_knots_ is not None else seq.times
    T = seq.T
    diverged_total = 0

    hops = []
    for i in range(T - 1):
        gen, div = pushforward_chain(
            field, seq.samples(i), seq.times[i : i + 2], n_steps, knots=knots
        )
        diverged_total += int(div.sum())
        hops.append((gen[-1][~div], seq.samples(i + 1)))
    wd1, wd1_std = _multi_seed_w1(hops, n_projections, seed)

    two_hops = []
    for i in range(T - 2):
        gen, div = pushforward_chain(
            field, seq.samples(i), seq.times[i : i + 3], n_steps, knots=knots
        )
        diverged_total += int(div.sum())
        two_hops.append((gen[-1][~div], seq.samples(i + 2)))
    wd2, wd2_std = _multi_seed_w1(two_hops, n_projections, seed)

    gen, div = pushforward_chain(field, seq.samples(0), seq.times, n_steps, knots=knots)
    diverged_total += int(div.sum())
    keep = ~div
    wd_fc, wd_fc_std = _multi_seed_w1([(gen[-1][keep], seq.samples(T - 1))], n_projections, seed)
    per_marginal = [
        sliced_w1(gen[k][keep], seq.samples(k), n_projections, np.random.default_rng(seed))
        for k in range(T)
    ]
    return {
        "wd1": wd1,
        "wd2": wd2,
        "wd_fc": wd_fc,
        "wd1_std": wd1_std,
        "wd2_std": wd2_std,
        "wd_fc_std": wd_fc_std,
        "per_marginal_wd": per_marginal,
        "chain_generated": gen,
        "diverged": diverged_total,
    }


def segment_majority(assignments, segment_ids):
    """Per-segment majority label; ties break toward the smaller label."""
    assignments = np.asarray(assignments, dtype=np.int64)
    segment_ids = np.asarray(segment_ids)
    segments = sorted(set(segment_ids.tolist()))
    major = []
    for s in segments:
        votes = np.bincount(assignments[segment_ids == s])
        major.append(int(np.argmax(votes)))
    return segments, major


def _contingency(true_labels, pred_labels):
    true_labels = np.asarray(true_labels)
    pred_labels = np.asarray(pred_labels)
    if true_labels.shape != pred_labels.shape:
        raise ValueError("label arrays must align")
    ta, ti = np.unique(true_labels, return_inverse=True)
    pa, pi = np.unique(pred_labels, return_inverse=True)
    table = np.zeros((ta.size, pa.size), dtype=np.int64)
    np.add.at(table, (ti, pi), 1)
    return table


def ari(true_labels, pred_labels):
    """Adjusted Rand index from the contingency table."""
    table = _contingency(true_labels, pred_labels)
    n = table.sum()

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ab = comb2(table.astype(np.float64)).sum()
    sum_a = comb2(table.sum(axis=1).astype(np.float64)).sum()
    sum_b = comb2(table.sum(axis=0).astype(np.float64)).sum()
    total = comb2(float(n))
    if total == 0:
        return 1.0
    expected = sum_a * sum_b / total
    denom = 0.5 * (sum_a + sum_b) - expected
    if denom == 0:
        # Degenerate table: fall back to exact partition comparison.
        return 1.0 if _same_partition(true_labels, pred_labels) else 0.0
    return float((sum_ab - expected) / denom)


def _same_partition(a, b):
    table = _contingency(a, b)
    return bool(np.all((table > 0).sum(axis=0) <= 1) and np.all((table > 0).sum(axis=1) <= 1))


def nmi(true_labels, pred_labels):
    """Normalized mutual information 2I/(H_true + H_pred) in [0, 1]."""
    table = _contingency(true_labels, pred_labels).astype(np.float64)
    n = table.sum()
    p_ab = table / n
    p_a = p_ab.sum(axis=1)
    p_b = p_ab.sum(axis=0)
    h_a = -np.sum(p_a[p_a > 0] * np.log(p_a[p_a > 0]))
    h_b = -np.sum(p_b[p_b > 0] * np.log(p_b[p_b > 0]))
    if h_a + h_b == 0:
        return 1.0 if _same_partition(true_labels, pred_labels) else 0.0
    mask = p_ab > 0
    outer = np.outer(p_a, p_b)
    info = np.sum(p_ab[mask] * np.log(p_ab[mask] / outer[mask]))
    val = 2.0 * info / (h_a + h_b)
    return float(min(max(val, 0.0), 1.0))


def switch_rate(labels):
    """Fraction of adjacent segments whose majority label changes."""
    labels = np.asarray(labels)
    if labels.shape[0] < 2:
        return 0.0
    return float(np.mean(labels[1:] != labels[:-1]))


def gating_entropy(weights):
    """Average entropy of router probability rows."""
    w = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    return float(np.mean(categorical_entropy(w)))


def regime_report(model, seq: MarginalSequence):
    """Route every marginal sample at its own time and score the recovered
    per-segment regimes against the ground-truth labels."""
    hard_all = []
    seg_all = []
    probs = []
    from .nn import softmax

    for k in range(seq.T):
        X = seq.samples(k)
        t = seq.times[k]
        if model.n_experts == 1:
            hard = np.zeros(X.shape[0], dtype=np.int64)
            q = np.ones((X.shape[0], 1))
        else:
            logits = model.logits(t, X, X if model.source_conditioning else None)
            hard = np.argmax(logits, axis=1)
            q = softmax(logits, axis=1)
        hard_all.append(hard)
        probs.append(q)
        seg_all.append(np.full(X.shape[0], seq.segment_ids[k]))
    hard_all = np.concatenate(hard_all)
    seg_all = np.concatenate(seg_all)
    probs = np.vstack(probs)

    segments, pred = segment_majority(hard_all, seg_all)
    out = {
        "gating_entropy": gating_entropy(probs),
        "switch_rate": switch_rate(pred),
        "majority_usage": float(np.max(np.bincount(hard_all, minlength=model.n_experts)) / hard_all.shape[0]),
        "pred_segment_labels": pred,
    }
    if seq.regime_labels is not None:
        seg_to_true = {}
        for k in range(seq.T):
            seg_to_true[seq.segment_ids[k]] = seq.regime_labels[k]
        true = [seg_to_true[s] for s in segments]
        out["seg_ari"] = ari(true, pred)
        out["seg_nmi"] = nmi(true, pred)
        out["true_segment_labels"] = true
    return out


@dataclass
class GmmResult:
    labels: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    weights: np.ndarray
    log_likelihoods: list


def _gaussian_logpdf(X, mean, cov):
    d = X.shape[1]
    L = np.linalg.cholesky(cov)
    diff = X - mean
    sol = np.linalg.solve(L, diff.T)
    maha = np.sum(sol * sol, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return -0.5 * (d * np.log(2.0 * np.pi) + logdet + maha)


def gmm_em(X, k, max_iter=100, rng=None, tol=1e-8, reg=1e-6):
    """Full-covariance EM with k-means init.

    The log-likelihood is asserted non-decreasing (tolerance 1e-9) except
    across component resets after singular covariances.
    """
    X = as_matrix(X, "X")
    rng = rng if rng is not None else np.random.default_rng(0)
    n, d = X.shape
    km = kmeans(X, k, rng=rng)
    means = km.centers.copy()
    covs = np.empty((k, d, d))
    weights = np.empty(k)
    eye = np.eye(d)
    for j in range(k):
        mask = km.assignments == j
        pts = X[mask] if np.any(mask) else X
        diff = pts - pts.mean(axis=0)
        covs[j] = diff.T @ diff / pts.shape[0] + reg * eye
        weights[j] = max(mask.sum(), 1) / n
    weights /= weights.sum()

    lls = []
    reset_last = False
    for _ in range(int(max_iter)):
        log_p = np.empty((n, k))
        for j in range(k):
            try:
                log_p[:, j] = np.log(weights[j] + 1e-300) + _gaussian_logpdf(X, means[j], covs[j])
            except np.linalg.LinAlgError:
                means[j] = X[rng.integers(0, n)]
                gd = X - X.mean(axis=0)
                covs[j] = gd.T @ gd / n + reg * eye
                log_p[:, j] = np.log(weights[j] + 1e-300) + _gaussian_logpdf(X, means[j], covs[j])
                reset_last = True
        mx = log_p.max(axis=1, keepdims=True)
        lse = mx + np.log(np.exp(log_p - mx).sum(axis=1, keepdims=True))
        ll = float(lse.sum())
        if lls and not reset_last and ll < lls[-1] - 1e-9:
            raise AssertionError("EM log-likelihood decreased")
        reset_last = False
        resp = np.exp(log_p - lse)

        nk = resp.sum(axis=0)
        prev_means = means.copy()
        for j in range(k):
            if nk[j] < 1e-10:
                means[j] = X[rng.integers(0, n)]
                gd = X - X.mean(axis=0)
                covs[j] = gd.T @ gd / n + reg * eye
                weights[j] = 1.0 / n
                reset_last = True
                continue
            means[j] = resp[:, j] @ X / nk[j]
            diff = X - means[j]
            covs[j] = (resp[:, j][:, None] * diff).T @ diff / nk[j] + reg * eye
            weights[j] = nk[j] / n
        weights /= weights.sum()
        if lls and not reset_last and abs(ll - lls[-1]) < tol * max(1.0, abs(ll)):
            lls.append(ll)
            break
        lls.append(ll)
    labels = np.argmax(resp, axis=1)
    return GmmResult(labels, means, covs, weights, lls)


def gaussian_baseline(seq: MarginalSequence, rng):
    """Per-marginal Gaussian fit; returns one sampled set per marginal."""
    out = []
    for k in range(seq.T):
        X = seq.samples(k)
        mean = X.mean(axis=0)
        diff = X - mean
        cov = diff.T @ diff / X.shape[0]
        L = np.linalg.cholesky(cov + 1e-9 * np.eye(X.shape[1]))
        z = rng.standard_normal(X.shape)
        out.append(mean + z @ L.T)
    return out


def linear_interp_baseline(pair, rng, alpha=1.0, n=None, coupling=None):
    """Linear interpolation between randomly paired endpoints."""
    A, B = pair
    coupling = coupling if coupling is not None else Coupling(kind="random_perm")
    n = n if n is not None else min(A.shape[0], B.shape[0])
    x0, x1 = couple(coupling, A, B, n, rng)
    return (1.0 - alpha) * x0 + alpha * x1


def static_ot_map(A, B, epsilon=None, max_iter=1000):
    """Barycentric projection of A onto B under the entropic OT plan."""
    A = as_matrix(A)
    B = as_matrix(B)
    diff = A[:, None, :] - B[None, :, :]
    cost = np.einsum("ijk,ijk->ij", diff, diff)
    plan = sinkhorn_plan(cost, epsilon, max_iter)
    row = plan.sum(axis=1, keepdims=True)
    return (plan / row) @ B


def clustering_regime_metrics(seq: MarginalSequence, method="kmeans", k=2, seed=0):
    """Segment ARI/NMI of a clustering baseline applied to pooled samples."""
    if seq.regime_labels is None:
        raise ValueError("sequence has no regime labels")
    X = seq.pooled()
    seg = np.concatenate(
        [np.full(seq.samples(i).shape[0], seq.segment_ids[i]) for i in range(seq.T)]
    )
    rng = np.random.default_rng(seed)
    if method == "kmeans":
        labels = kmeans(X, k, rng=rng).assignments
    elif method == "gmm":
        labels = gmm_em(X, k, rng=rng).labels
    else:
        raise ValueError(f"unknown clustering method {method!r}")
    segments, pred = segment_majority(labels, seg)
    true = [seq.regime_labels[seq.segment_ids.index(s)] for s in segments]
    return {"seg_ari": ari(true, pred), "seg_nmi": nmi(true, pred)}
