"""Stage-2 velocity models.

A mixture of K expert MLPs combined by a router through Straight-Through
Gumbel-Softmax.  The composite objective is finite-safe flow matching plus
velocity/parameter regularization and the routing-penalty suite; all
gradients are assembled by hand and flow through the soft routing path.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dataclass_fields

import numpy as np

from .nn import (
    ENTROPY_EPS,
    AdamWState,
    GumbelSchedule,
    Mlp,
    TimeEmbedding,
    adamw_step,
    categorical_entropy,
    gumbel_softmax_full,
    log_sum_exp,
    sample_gumbel,
    softmax,
)
from .transport import Coupling, couple
from .validation import check_simplex

__all__ = [
    "MixtureVelocityModel",
    "RoutingBatch",
    "PenaltyWeights",
    "VelocityTrainConfig",
    "mixture_velocity",
    "flow_matching_loss",
    "penalty_diversity",
    "penalty_sparsity",
    "penalty_consistency",
    "penalty_load_balance",
    "penalty_z",
    "penalty_confidence",
    "penalty_clustering",
    "penalty_segments",
    "composite_loss",
    "train_velocity",
]

RESIDUAL_CLAMP = 1e3


class MixtureVelocityModel:
    """K expert MLPs plus a router; K = 1 degenerates to a single net."""

    def __init__(
        self,
        experts,
        router,
        time_embedding: TimeEmbedding,
        gumbel: GumbelSchedule,
        source_conditioning=False,
        time_mode="global",
    ):
        if not experts:
            raise ValueError("need at least one expert")
        out_dim = experts[0].out_dim
        in_dim = experts[0].in_dim
        if any(e.out_dim != out_dim or e.in_dim != in_dim for e in experts):
            raise ValueError("experts must share input/output dims")
        if router.out_dim != len(experts):
            raise ValueError("router output dim must equal the number of experts")
        self.experts = experts
        self.router = router
        self.time_embedding = time_embedding
        self.gumbel = gumbel
        self.source_conditioning = bool(source_conditioning)
        self.time_mode = time_mode
        self.data_dim = out_dim
        self.time_knots_ = None

    @classmethod
    def init(
        cls,
        data_dim,
        n_experts=2,
        expert_hidden=(8, 8),
        router_hidden=(64, 64),
        router_activation="tanh",
        time_dim=16,
        gumbel=None,
        source_conditioning=False,
        time_mode="global",
        rng=None,
    ):
        emb = TimeEmbedding(time_dim)
        feat = time_dim + data_dim + (data_dim if source_conditioning else 0)
        experts = [
            Mlp.init([feat, *expert_hidden, data_dim], activation="relu", rng=rng)
            for _ in range(int(n_experts))
        ]
        router = Mlp.init([feat, *router_hidden, int(n_experts)], activation=router_activation, rng=rng)
        return cls(
            experts,
            router,
            emb,
            gumbel if gumbel is not None else GumbelSchedule(),
            source_conditioning=source_conditioning,
            time_mode=time_mode,
        )

    @property
    def n_experts(self):
        return len(self.experts)

    def parameters(self):
        out = []
        for e in self.experts:
            out.extend(e.parameters())
        out.extend(self.router.parameters())
        return out

    def features(self, t, X, source=None):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (X.shape[0],))
        parts = [self.time_embedding.embed(t_arr), X]
        if self.source_conditioning:
            if source is None:
                raise ValueError("model is source-conditioned; source is required")
            parts.append(np.atleast_2d(np.asarray(source, dtype=np.float64)))
        return np.hstack(parts)

    def logits(self, t, X, source=None):
        return self.router.forward(self.features(t, X, source))

    def route(self, t, X, source=None, mode="deterministic", rng=None, tau=1.0):
        """Routing weights per sample.

        soft / hard follow the Gumbel-Softmax estimator; deterministic is
        the inference rule (one-hot at the argmax logit).
        """
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.n_experts == 1:
            logits = np.zeros((X.shape[0], 1))
            return logits, np.ones((X.shape[0], 1))
        logits = self.logits(t, X, source)
        if mode == "deterministic":
            w = np.zeros_like(logits)
            w[np.arange(logits.shape[0]), np.argmax(logits, axis=1)] = 1.0
        elif mode in ("soft", "hard"):
            if rng is None:
                raise ValueError("soft/hard routing requires an rng")
            w, _ = gumbel_softmax_full(logits, tau, mode == "hard", rng)
        else:
            raise ValueError(f"unknown routing mode {mode!r}")
        return logits, w

    def expert_outputs(self, t, X, source=None):
        feats = self.features(t, X, source)
        return np.stack([e.forward(feats) for e in self.experts])

    def velocity(self, t, X, source=None, weights=None, mode="deterministic", rng=None, tau=1.0):
        """Mixture velocity sum_m w_m f_m at (t, X)."""
        outs = self.expert_outputs(t, X, source)
        if weights is None:
            _, weights = self.route(t, X, source=source, mode=mode, rng=rng, tau=tau)
        weights = np.atleast_2d(weights)
        return np.einsum("mnd,nm->nd", outs, weights)

    def to_dict(self, metric_hash=None, bend_hash=None):
        return {
            "n_experts": self.n_experts,
            "expert_layer_dims": list(self.experts[0].layer_dims),
            "expert_activation": self.experts[0].activation,
            "expert_params": [e.flat_params() for e in self.experts],
            "router_layer_dims": list(self.router.layer_dims),
            "router_activation": self.router.activation,
            "router_params": self.router.flat_params(),
            "time_dim": self.time_embedding.dim,
            "gumbel": {
                "tau_init": self.gumbel.tau_init,
                "tau_min": self.gumbel.tau_min,
                "tau_decay": self.gumbel.tau_decay,
                "soft_epochs": self.gumbel.soft_epochs,
            },
            "source_conditioning": self.source_conditioning,
            "time_mode": self.time_mode,
            "time_knots": None if self.time_knots_ is None else np.asarray(self.time_knots_),
            "metric_hash": metric_hash,
            "bend_hash": bend_hash,
        }

    @classmethod
    def from_dict(cls, d):
        experts = []
        for flat in d["expert_params"]:
            net = Mlp.zeros(d["expert_layer_dims"], activation=d["expert_activation"])
            net.set_flat_params(flat)
            experts.append(net)
        router = Mlp.zeros(d["router_layer_dims"], activation=d["router_activation"])
        router.set_flat_params(d["router_params"])
        model = cls(
            experts,
            router,
            TimeEmbedding(d["time_dim"]),
            GumbelSchedule(**d["gumbel"]),
            source_conditioning=d["source_conditioning"],
            time_mode=d["time_mode"],
        )
        if d.get("time_knots") is not None:
            model.time_knots_ = np.asarray(d["time_knots"], dtype=np.float64)
        return model


def mixture_velocity(model: MixtureVelocityModel, t, x, source=None, weights=None):
    """Convex combination of expert outputs under the given weights."""
    if weights is not None:
        weights = check_simplex(weights)
    return model.velocity(t, x, source=source, weights=weights)


@dataclass
class RoutingBatch:
    """Per-sample routing quantities for one minibatch.

    ``weights`` are the forward routing weights (one-hot under hard mode),
    ``soft`` the straight-through soft weights, ``q`` the pre-Gumbel
    softmax rows.
    """

    weights: np.ndarray
    logits: np.ndarray
    q: np.ndarray = None
    soft: np.ndarray = None
    times: np.ndarray = None
    segment_ids: np.ndarray = None

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        self.logits = np.atleast_2d(np.asarray(self.logits, dtype=np.float64))
        check_simplex(self.weights)
        if self.q is None:
            self.q = softmax(self.logits, axis=1)
        if self.soft is None:
            self.soft = self.weights

    @property
    def n(self):
        return self.weights.shape[0]

    @property
    def k(self):
        return self.weights.shape[1]


def _entropy_grad(w):
    return -(np.log(w + ENTROPY_EPS) + w / (w + ENTROPY_EPS))


def penalty_diversity(batch: RoutingBatch, with_grad=False):
    """1 - H(mean weights)/log K: large when the batch collapses."""
    if batch.k == 1:
        return (0.0, np.zeros_like(batch.weights)) if with_grad else 0.0
    wbar = batch.weights.mean(axis=0)
    logk = np.log(batch.k)
    val = float(1.0 - categorical_entropy(wbar) / logk)
    if not with_grad:
        return val
    dwbar = -_entropy_grad(wbar) / logk
    grad = np.broadcast_to(dwbar / batch.n, batch.weights.shape).copy()
    return val, grad


def penalty_sparsity(batch: RoutingBatch, with_grad=False):
    """Mean per-sample entropy / log K: small when samples commit."""
    if batch.k == 1:
        return (0.0, np.zeros_like(batch.weights)) if with_grad else 0.0
    logk = np.log(batch.k)
    val = float(np.mean(categorical_entropy(batch.weights)) / logk)
    if not with_grad:
        return val
    grad = _entropy_grad(batch.weights) / (batch.n * logk)
    return val, grad


def _group_indices(ids):
    ids = np.asarray(ids)
    order = {}
    for i, s in enumerate(ids):
        order.setdefault(s, []).append(i)
    return [np.asarray(v) for _, v in sorted(order.items())]


def penalty_consistency(batch: RoutingBatch, time_groups=None, with_grad=False):
    """Mean within-group variance of routing weights (over components)."""
    if time_groups is None:
        if batch.times is None:
            raise ValueError("consistency penalty needs time groups or times")
        time_groups = _group_indices(batch.times)
    G = len(time_groups)
    val = 0.0
    grad = np.zeros_like(batch.weights)
    for g in time_groups:
        w = batch.weights[g]
        mu = w.mean(axis=0)
        var = np.mean((w - mu) ** 2, axis=0)
        val += float(var.mean())
        if with_grad:
            grad[g] += 2.0 * (w - mu) / (g.shape[0] * batch.k * G)
    val /= max(G, 1)
    return (val, grad) if with_grad else val


def penalty_load_balance(batch: RoutingBatch, with_grad=False):
    """K * sum_j F_j P_j with hard fractions F and mean soft usage P."""
    hard = np.argmax(batch.weights, axis=1)
    F = np.bincount(hard, minlength=batch.k) / batch.n
    P = batch.weights.mean(axis=0)
    val = float(batch.k * np.sum(F * P))
    if not with_grad:
        return val
    grad = np.broadcast_to(batch.k * F / batch.n, batch.weights.shape).copy()
    return val, grad


def penalty_z(batch: RoutingBatch, with_grad=False):
    """Mean squared log-sum-exp of the router logits."""
    lse = log_sum_exp(batch.logits, axis=1)
    val = float(np.mean(lse**2))
    if not with_grad:
        return val
    grad = (2.0 / batch.n) * lse[:, None] * softmax(batch.logits, axis=1)
    return val, grad


def penalty_confidence(batch: RoutingBatch, with_grad=False):
    """Mean (1 - max routing weight)."""
    mx = batch.weights.max(axis=1)
    val = float(np.mean(1.0 - mx))
    if not with_grad:
        return val
    grad = np.zeros_like(batch.weights)
    grad[np.arange(batch.n), np.argmax(batch.weights, axis=1)] = -1.0 / batch.n
    return val, grad


def clustering_target(q):
    """Self-sharpened target: squared assignments renormalized by usage."""
    f = q.sum(axis=0)
    r = q**2 / np.maximum(f, ENTROPY_EPS)
    return r / r.sum(axis=1, keepdims=True)


def penalty_clustering(batch: RoutingBatch, with_grad=False):
    """Per-sample mean KL(Q || P); the target P is treated as constant."""
    q = batch.q
    p = clustering_target(q)
    ratio = np.log((q + ENTROPY_EPS) / (p + ENTROPY_EPS))
    val = float(np.sum(q * ratio) / batch.n)
    if not with_grad:
        return val
    grad = (ratio + q / (q + ENTROPY_EPS)) / batch.n
    return val, grad


@dataclass
class SegmentPenalties:
    seg_con: float
    seg_sharp: float
    tv: float
    contig: float


def penalty_segments(batch: RoutingBatch, with_grad=False):
    """Segment-level penalties (consistency, sharpness, total variation,
    contiguity) computed from per-segment mean routing vectors."""
    if batch.segment_ids is None:
        raise ValueError("segment penalties need segment ids")
    groups = _group_indices(batch.segment_ids)
    S = len(groups)
    K = batch.k
    logk = np.log(K) if K > 1 else 1.0
    means = np.stack([batch.weights[g].mean(axis=0) for g in groups])

    seg_con = 0.0
    grad_con = np.zeros_like(batch.weights)
    for g in groups:
        w = batch.weights[g]
        mu = w.mean(axis=0)
        seg_con += float(np.mean((w - mu) ** 2))
        if with_grad:
            grad_con[g] += 2.0 * (w - mu) / (g.shape[0] * K * S)
    seg_con /= S

    seg_sharp = float(np.mean(categorical_entropy(means)) / logk) if K > 1 else 0.0

    if S > 1:
        diffs = means[:-1] - means[1:]
        tv = float(np.sum(np.abs(diffs)) / (S - 1))
    else:
        tv = 0.0

    pos = np.arange(1, S + 1, dtype=np.float64)
    y = pos[:, None] * means
    ybar = y.mean(axis=0)
    var_j = np.mean((y - ybar) ** 2, axis=0)
    denom = means.sum(axis=0) + ENTROPY_EPS
    contig = float(np.mean(var_j / denom))

    vals = SegmentPenalties(seg_con, seg_sharp, tv, contig)
    if not with_grad:
        return vals

    dmeans_sharp = np.zeros_like(means)
    if K > 1:
        dmeans_sharp = _entropy_grad(means) / (S * logk)
    dmeans_tv = np.zeros_like(means)
    if S > 1:
        sign = np.sign(diffs) / (S - 1)
        dmeans_tv[:-1] += sign
        dmeans_tv[1:] -= sign
    dy = 2.0 * (y - ybar) / S
    dmeans_contig = (dy * pos[:, None] / denom - var_j / denom**2) / K

    grad_sharp = np.zeros_like(batch.weights)
    grad_tv = np.zeros_like(batch.weights)
    grad_contig = np.zeros_like(batch.weights)
    for s, g in enumerate(groups):
        grad_sharp[g] += dmeans_sharp[s] / g.shape[0]
        grad_tv[g] += dmeans_tv[s] / g.shape[0]
        grad_contig[g] += dmeans_contig[s] / g.shape[0]
    return vals, (grad_con, grad_sharp, grad_tv, grad_contig)


@dataclass
class PenaltyWeights:
    """Weights of the routing-penalty suite; zero disables a term.

    The load-balance weight decays linearly from lb_start to lb_end over
    training.
    """

    div: float = 1.0
    con: float = 0.0
    sp: float = 0.0
    lb_start: float = 0.1
    lb_end: float = 0.001
    z: float = 0.01
    conf: float = 0.05
    clust: float = 0.5
    seg_con: float = 0.0
    seg_sharp: float = 0.0
    tv: float = 0.05
    contig: float = 0.0
    vel: float = 0.1
    l2: float = 0.0

    def __post_init__(self):
        for f in dataclass_fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"penalty weight {f.name} must be >= 0")

    def lb_at(self, epoch, total_epochs):
        if total_epochs <= 1:
            return self.lb_end
        frac = min(max(epoch / (total_epochs - 1), 0.0), 1.0)
        return self.lb_start + frac * (self.lb_end - self.lb_start)

    @classmethod
    def zeros(cls):
        return cls(
            div=0.0, con=0.0, sp=0.0, lb_start=0.0, lb_end=0.0, z=0.0, conf=0.0,
            clust=0.0, seg_con=0.0, seg_sharp=0.0, tv=0.0, contig=0.0, vel=0.0, l2=0.0,
        )


def flow_matching_loss(pred, target):
    """Finite-safe MSE: non-finite entries are zeroed, residuals clamped to
    [-1e3, 1e3] before squaring; the result is always finite."""
    loss, _ = fm_loss_and_grad(pred, target)
    return loss


def fm_loss_and_grad(pred, target):
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ValueError("pred and target shapes must match")
    pred_ok = np.isfinite(pred)
    p = np.where(pred_ok, pred, 0.0)
    t = np.where(np.isfinite(target), target, 0.0)
    with np.errstate(over="ignore"):
        r = p - t
    rc = np.clip(r, -RESIDUAL_CLAMP, RESIDUAL_CLAMP)
    loss = float(np.mean(rc**2))
    grad = 2.0 * rc * (np.abs(r) <= RESIDUAL_CLAMP) * pred_ok / rc.size
    return loss, grad


def routing_loss_terms(batch: RoutingBatch, pw: PenaltyWeights, lb_weight):
    """All penalty values for a batch; terms with zero weight still report."""
    terms = {
        "div": penalty_diversity(batch),
        "sp": penalty_sparsity(batch),
        "lb": penalty_load_balance(batch),
        "z": penalty_z(batch),
        "conf": penalty_confidence(batch),
        "clust": penalty_clustering(batch),
    }
    terms["con"] = (
        penalty_consistency(batch) if batch.times is not None and batch.k > 1 else 0.0
    )
    if batch.segment_ids is not None:
        segs = penalty_segments(batch)
        terms.update(
            {"seg_con": segs.seg_con, "seg_sharp": segs.seg_sharp, "tv": segs.tv, "contig": segs.contig}
        )
    else:
        terms.update({"seg_con": 0.0, "seg_sharp": 0.0, "tv": 0.0, "contig": 0.0})
    total = (
        pw.div * terms["div"]
        + pw.con * terms["con"]
        + pw.sp * terms["sp"]
        + lb_weight * terms["lb"]
        + pw.z * terms["z"]
        + pw.conf * terms["conf"]
        + pw.clust * terms["clust"]
        + pw.seg_con * terms["seg_con"]
        + pw.seg_sharp * terms["seg_sharp"]
        + pw.tv * terms["tv"]
        + pw.contig * terms["contig"]
    )
    return total, terms


def composite_loss(fm, batch: RoutingBatch, pw: PenaltyWeights, lb_weight, vel_reg=0.0, l2_reg=0.0):
    """Total objective value: FM + l2 + velocity reg + weighted routing."""
    routing, terms = routing_loss_terms(batch, pw, lb_weight)
    total = fm + pw.l2 * l2_reg + pw.vel * vel_reg + routing
    terms = dict(terms)
    terms.update({"fm": fm, "vel": vel_reg, "l2": l2_reg, "routing": routing})
    return total, terms


def _routing_grads(batch: RoutingBatch, pw: PenaltyWeights, lb_weight):
    """Accumulated penalty gradients w.r.t. (forward weights, Q, logits)."""
    dW = np.zeros_like(batch.weights)
    dQ = np.zeros_like(batch.q)
    dlogits = np.zeros_like(batch.logits)
    if pw.div > 0:
        _, g = penalty_diversity(batch, with_grad=True)
        dW += pw.div * g
    if pw.sp > 0:
        _, g = penalty_sparsity(batch, with_grad=True)
        dW += pw.sp * g
    if pw.con > 0 and batch.times is not None:
        _, g = penalty_consistency(batch, with_grad=True)
        dW += pw.con * g
    if lb_weight > 0:
        _, g = penalty_load_balance(batch, with_grad=True)
        dW += lb_weight * g
    if pw.conf > 0:
        _, g = penalty_confidence(batch, with_grad=True)
        dW += pw.conf * g
    if pw.z > 0:
        _, g = penalty_z(batch, with_grad=True)
        dlogits += pw.z * g
    if pw.clust > 0:
        _, g = penalty_clustering(batch, with_grad=True)
        dQ += pw.clust * g
    if batch.segment_ids is not None and (
        pw.seg_con > 0 or pw.seg_sharp > 0 or pw.tv > 0 or pw.contig > 0
    ):
        _, (g_con, g_sharp, g_tv, g_contig) = penalty_segments(batch, with_grad=True)
        dW += pw.seg_con * g_con + pw.seg_sharp * g_sharp + pw.tv * g_tv + pw.contig * g_contig
    return dW, dQ, dlogits


def softmax_vjp(s, upstream):
    """Rows: J_softmax^T @ upstream given softmax outputs s."""
    dot = np.sum(upstream * s, axis=1, keepdims=True)
    return s * (upstream - dot)


@dataclass
class VelocityTrainConfig:
    epochs: int = 180
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-5
    n_experts: int = 2
    expert_hidden: tuple = (8, 8)
    router_hidden: tuple = (64, 64)
    router_activation: str = "tanh"
    time_dim: int = 16
    gumbel: GumbelSchedule = field(default_factory=GumbelSchedule)
    penalties: PenaltyWeights = field(default_factory=PenaltyWeights)
    coupling: Coupling = field(default_factory=Coupling)
    source_conditioning: bool = True
    time_mode: str = "global"
    val_fraction: float = 0.2
    early_stop_patience: int = 30
    steps_per_epoch: int = None  # None -> one pass over all endpoint pairs


def _pair_time(seq, i, j, alpha, time_mode):
    if time_mode == "local":
        return alpha
    ti, tj = seq.times[i], seq.times[j]
    return ti + alpha * (tj - ti)


def train_velocity(seq, pairs, bend, metric, config: VelocityTrainConfig, rng):
    """Train the mixture velocity field on bend-interpolated samples.

    ``pairs`` lists (i, j) marginal-index pairs; ``bend`` may be None for
    Euclidean variants (a zero bend is used, giving straight paths and
    straight-line tangents).  Returns (model, epoch log records).
    """
    d = seq.dim
    if bend is None:
        from .bend import BendModel

        bend = BendModel.zero(d)
    model = MixtureVelocityModel.init(
        d,
        n_experts=config.n_experts,
        expert_hidden=tuple(config.expert_hidden),
        router_hidden=tuple(config.router_hidden),
        router_activation=config.router_activation,
        time_dim=config.time_dim,
        gumbel=config.gumbel,
        source_conditioning=config.source_conditioning,
        time_mode=config.time_mode,
        rng=rng,
    )
    knots = sorted({seq.times[i] for i, _ in pairs} | {seq.times[j] for _, j in pairs})
    model.time_knots_ = np.asarray(knots)
    K = model.n_experts
    pw = config.penalties

    # Fixed 80/20 endpoint split per marginal; validation pairs drawn once.
    split_rng = np.random.default_rng(rng.integers(0, 2**31 - 1))
    train_idx, val_idx = {}, {}
    for k in {i for p in pairs for i in p}:
        n = seq.samples(k).shape[0]
        n_val = int(round(config.val_fraction * n))
        perm = split_rng.permutation(n)
        val_idx[k] = perm[:n_val]
        train_idx[k] = perm[n_val:] if n_val < n else perm

    val_batches = []
    for i, j in pairs:
        A = seq.samples(i)[val_idx[i]]
        B = seq.samples(j)[val_idx[j]]
        if A.shape[0] == 0 or B.shape[0] == 0:
            continue
        n_val = min(A.shape[0], B.shape[0])
        x0, x1 = couple(config.coupling, A, B, n_val, split_rng)
        alpha = split_rng.uniform(size=n_val)
        z = bend.interpolate(x0, x1, alpha)
        u = bend.tangent(x0, x1, alpha)
        t = _pair_time(seq, i, j, alpha, config.time_mode)
        val_batches.append((t, z, u, x0))

    sizes = np.array(
        [min(train_idx[i].shape[0], train_idx[j].shape[0]) for i, j in pairs], dtype=float
    )
    if np.any(sizes <= 0):
        raise ValueError("empty training marginal after validation split")
    weights_p = sizes / sizes.sum()
    steps = config.steps_per_epoch
    if steps is None:
        steps = max(1, int(np.ceil(sizes.sum() / config.batch_size)))

    opt = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    params = model.parameters()

    best_val = np.inf
    best_params = None
    bad_epochs = 0
    log = []
    skipped = 0
    for epoch in range(int(config.epochs)):
        tau = config.gumbel.tau_at(epoch)
        hard = config.gumbel.hard_at(epoch)
        lb_weight = pw.lb_at(epoch, config.epochs)
        epoch_terms = {}
        epoch_total = 0.0
        n_ok = 0
        for _ in range(steps):
            pick = rng.choice(len(pairs), size=config.batch_size, p=weights_p)
            xs0, xs1, als, ts, segs = [], [], [], [], []
            for pid in np.unique(pick):
                count = int(np.sum(pick == pid))
                i, j = pairs[pid]
                A = seq.samples(i)[train_idx[i]]
                B = seq.samples(j)[train_idx[j]]
                x0, x1 = couple(config.coupling, A, B, count, rng)
                alpha = rng.uniform(size=count)
                xs0.append(x0)
                xs1.append(x1)
                als.append(alpha)
                ts.append(_pair_time(seq, i, j, alpha, config.time_mode))
                segs.append(np.full(count, seq.segment_ids[i]))
            x0 = np.vstack(xs0)
            x1 = np.vstack(xs1)
            alpha = np.concatenate(als)
            t = np.concatenate(ts)
            seg_ids = np.concatenate(segs)

            z = bend.interpolate(x0, x1, alpha)
            u = bend.tangent(x0, x1, alpha)
            total, terms = _train_step(
                model, opt, params, t, z, u, x0, seg_ids, tau, hard, lb_weight, pw, rng
            )
            if total is None:
                skipped += 1
                continue
            epoch_total += total
            n_ok += 1
            for key, val in terms.items():
                epoch_terms[key] = epoch_terms.get(key, 0.0) + val
        for key in epoch_terms:
            epoch_terms[key] /= max(n_ok, 1)

        val_fm = _validation_fm(model, val_batches)
        record = {
            "epoch": epoch,
            "loss": epoch_total / max(n_ok, 1),
            "val_fm": val_fm,
            "tau": tau,
            "hard": bool(hard),
            "lambda_lb": lb_weight,
            "lr": opt.lr,
        }
        record.update(epoch_terms)
        log.append(record)

        if val_fm < best_val - 1e-12:
            best_val = val_fm
            best_params = [p.copy() for p in params]
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > config.early_stop_patience:
                break
    if best_params is not None:
        for p, bp in zip(params, best_params):
            p[...] = bp
    model.skipped_batches_ = skipped
    model.val_fm_ = best_val
    return model, log


def velocity_loss_and_grads(model, t, z, u, src, seg_ids, tau, hard, lb_weight, pw, noise):
    """Composite loss and parameter gradients for one batch.

    ``noise`` is the pre-drawn Gumbel perturbation so that re-evaluations
    (finite differences, straight-through checks) see the same draw.
    Gradients flow through the soft routing path in both modes.
    """
    B = z.shape[0]
    K = model.n_experts
    feats = model.features(t, z, src if model.source_conditioning else None)
    expert_fwd = [e.forward_cached(feats) for e in model.experts]
    F = np.stack([out for out, _ in expert_fwd])

    if K > 1:
        logits, r_acts = model.router.forward_cached(feats)
        q = softmax(logits, axis=1)
        perturbed = logits + noise
        w_soft = softmax(perturbed / tau, axis=1)
        if hard:
            w_fwd = np.zeros_like(w_soft)
            w_fwd[np.arange(B), np.argmax(perturbed, axis=1)] = 1.0
        else:
            w_fwd = w_soft
    else:
        logits = np.zeros((B, 1))
        q = np.ones((B, 1))
        w_fwd = w_soft = np.ones((B, 1))

    v = np.einsum("mnd,nm->nd", F, w_fwd)
    fm, dv = fm_loss_and_grad(v, u)
    vel_reg = float(np.mean(np.sum(v * v, axis=1)))
    dv = dv + pw.vel * 2.0 * v / B

    batch = RoutingBatch(
        weights=w_fwd, logits=logits, q=q, soft=w_soft, times=t, segment_ids=seg_ids
    )
    params = model.parameters()
    l2_reg = float(sum(np.sum(p * p) for p in params)) if pw.l2 > 0 else 0.0
    total, terms = composite_loss(fm, batch, pw, lb_weight, vel_reg=vel_reg, l2_reg=l2_reg)

    grads = []
    for m, (_, acts) in enumerate(expert_fwd):
        g, _ = model.experts[m].backward(acts, w_fwd[:, m : m + 1] * dv)
        grads.extend(g)
    if K > 1:
        dW = np.einsum("mnd,nd->nm", F, dv)
        dW_pen, dQ, dlogits = _routing_grads(batch, pw, lb_weight)
        dW = dW + dW_pen
        dlogits = dlogits + softmax_vjp(w_soft, dW) / tau
        if np.any(dQ):
            dlogits = dlogits + softmax_vjp(q, dQ)
        g, _ = model.router.backward(r_acts, dlogits)
        grads.extend(g)
    else:
        grads.extend([np.zeros_like(p) for p in model.router.parameters()])
    if pw.l2 > 0:
        grads = [g + pw.l2 * 2.0 * p for g, p in zip(grads, params)]
    return total, terms, grads


def _train_step(model, opt, params, t, z, u, src, seg_ids, tau, hard, lb_weight, pw, rng):
    if model.n_experts > 1:
        noise = sample_gumbel((z.shape[0], model.n_experts), rng)
    else:
        noise = None
    total, terms, grads = velocity_loss_and_grads(
        model, t, z, u, src, seg_ids, tau, hard, lb_weight, pw, noise
    )
    if not np.isfinite(total) or any(not np.all(np.isfinite(g)) for g in grads):
        return None, None
    adamw_step(opt, params, grads)
    return total, terms


def _validation_fm(model, val_batches):
    if not val_batches:
        return np.inf
    losses = []
    weights = []
    for t, z, u, src in val_batches:
        v = model.velocity(t, z, source=src if model.source_conditioning else None, mode="deterministic")
        losses.append(flow_matching_loss(v, u))
        weights.append(z.shape[0])
    return float(np.average(losses, weights=weights))
