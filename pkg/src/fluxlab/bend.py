"""Stage-1 bend network.

The interpolant is the straight line between coupled endpoints plus a
learned correction scaled by gamma(tau) = 4*tau*(1-tau), which vanishes at
both endpoints.  Training minimizes quadrature path energy under the
frozen scalar metric, so paths are pulled toward the data manifold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import AdamWState, Mlp, adamw_step
from .transport import Coupling, couple
from .validation import as_matrix, check_positive

__all__ = [
    "BendModel",
    "BendTrainConfig",
    "gamma",
    "bend_interpolant",
    "bend_tangent",
    "path_energy",
    "train_bend",
]


def gamma(tau):
    """Endpoint-vanishing scale 4*tau*(1-tau); gamma(0.5) = 1."""
    tau = np.asarray(tau, dtype=np.float64)
    return 4.0 * tau * (1.0 - tau)


class BendModel:
    """Parameterized interpolant B(x0, x1, tau) with exact endpoints."""

    def __init__(self, net: Mlp, h_tau=1e-3):
        d, rem = divmod(net.in_dim - 1, 2)
        if rem != 0 or net.out_dim != d:
            raise ValueError("bend net must map (2d+1) -> d")
        self.net = net
        self.dim = d
        self.h_tau = float(h_tau)

    @classmethod
    def init(cls, dim, hidden=(64, 64), rng=None, h_tau=1e-3):
        net = Mlp.init([2 * dim + 1, *hidden, dim], activation="relu", rng=rng)
        # zero output layer: the initial interpolant is the straight line
        net.weights[-1][...] = 0.0
        net.biases[-1][...] = 0.0
        return cls(net, h_tau=h_tau)

    @classmethod
    def zero(cls, dim, h_tau=1e-3):
        """Bend with zero correction: the exact Euclidean interpolant."""
        return cls(Mlp.zeros([2 * dim + 1, 1, dim]), h_tau=h_tau)

    def _net_input(self, x0, x1, tau):
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (x0.shape[0],))
        return np.hstack([x0, x1, tau[:, None]]), tau

    def interpolate(self, x0, x1, tau):
        """B(x0, x1, tau), batched over rows."""
        x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
        inp, tau = self._net_input(x0, x1, tau)
        if np.any(tau < 0.0) or np.any(tau > 1.0):
            raise ValueError("tau must lie in [0, 1]")
        base = (1.0 - tau)[:, None] * x0 + tau[:, None] * x1
        return base + gamma(tau)[:, None] * self.net.forward(inp)

    def tangent(self, x0, x1, tau):
        """d/dtau of the interpolant via central differences (step h_tau),
        one-sided at the endpoints."""
        x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
        tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (x0.shape[0],))
        lo = np.maximum(tau - self.h_tau, 0.0)
        hi = np.minimum(tau + self.h_tau, 1.0)
        return (self.interpolate(x0, x1, hi) - self.interpolate(x0, x1, lo)) / (hi - lo)[:, None]

    def copy(self):
        return BendModel(self.net.copy(), h_tau=self.h_tau)

    def to_dict(self, metric_hash=None):
        return {
            "layer_dims": list(self.net.layer_dims),
            "activation": self.net.activation,
            "net_params": self.net.flat_params(),
            "h_tau": self.h_tau,
            "metric_hash": metric_hash,
        }

    @classmethod
    def from_dict(cls, d):
        net = Mlp.zeros(d["layer_dims"], activation=d["activation"])
        net.set_flat_params(d["net_params"])
        return cls(net, h_tau=d["h_tau"])


def bend_interpolant(b: BendModel, x0, x1, tau):
    return b.interpolate(x0, x1, tau)


def bend_tangent(b: BendModel, x0, x1, tau):
    return b.tangent(x0, x1, tau)


def _quadrature_nodes(n_points):
    check_positive(n_points, "n_energy_points")
    return (np.arange(int(n_points)) + 0.5) / int(n_points)


def path_energy(b: BendModel, metric, x0, x1, n_points=8):
    """Quadrature estimate of integral M(B(tau)) * ||dB/dtau||^2 d tau.

    Nodes sit at cell midpoints. Returns one energy per endpoint pair.
    """
    x0 = as_matrix(np.atleast_2d(x0))
    x1 = as_matrix(np.atleast_2d(x1))
    nodes = _quadrature_nodes(n_points)
    energies = np.zeros(x0.shape[0])
    for tau in nodes:
        pts = b.interpolate(x0, x1, tau)
        u = b.tangent(x0, x1, tau)
        m = metric.metric_scalar(pts) if metric is not None else np.ones(x0.shape[0])
        energies += m * np.sum(u * u, axis=1)
    return energies / nodes.shape[0]


@dataclass
class BendTrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-5
    hidden: tuple = (64, 64)
    n_energy_points: int = 8
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    early_stop_patience: int = 30
    coupling: Coupling = field(default_factory=Coupling)

    def __post_init__(self):
        if self.n_energy_points < 2:
            raise ValueError("n_energy_points must be >= 2")


def _energy_loss_and_grads(model: BendModel, metric, x0, x1, n_points):
    """Mean path energy over the batch and its gradient w.r.t. net params.

    The tangent is a finite difference of two net evaluations, so the
    gradient flows through three evaluations per quadrature node.
    """
    B, d = x0.shape
    nodes = _quadrature_nodes(n_points)
    h = model.h_tau
    inputs = []
    upstream_gamma = []  # gamma factor per evaluation row
    rows_grad = []

    loss = 0.0
    scale = 1.0 / (B * nodes.shape[0])
    for tau in nodes:
        lo = max(tau - h, 0.0)
        hi = min(tau + h, 1.0)
        span = hi - lo
        b_mid = model.interpolate(x0, x1, tau)
        b_lo = model.interpolate(x0, x1, lo)
        b_hi = model.interpolate(x0, x1, hi)
        u = (b_hi - b_lo) / span
        m = metric.metric_scalar(b_mid)
        dm = metric.metric_input_grad(b_mid)
        u2 = np.sum(u * u, axis=1)
        loss += float(np.sum(m * u2)) * scale

        g_mid = scale * u2[:, None] * dm
        g_hi = scale * (2.0 / span) * m[:, None] * u
        for tau_eval, g in ((tau, g_mid), (hi, g_hi), (lo, -g_hi)):
            t_col = np.full((B, 1), tau_eval)
            inputs.append(np.hstack([x0, x1, t_col]))
            upstream_gamma.append(np.full(B, gamma(tau_eval)))
            rows_grad.append(g)

    X_all = np.vstack(inputs)
    up_all = np.vstack(rows_grad) * np.concatenate(upstream_gamma)[:, None]
    _, acts = model.net.forward_cached(X_all)
    grads, _ = model.net.backward(acts, up_all)
    return loss, grads


def train_bend(seq, pairs, metric, config: BendTrainConfig, rng, init_model=None):
    """Train the bend network on endpoint pairs from every adjacent pair.

    ``pairs`` lists (i, j) marginal-index pairs of ``seq``.  The metric is
    frozen.  Uses AdamW with plateau-reduce learning-rate scheduling; the
    recorded loss curve tracks the best epoch loss seen so far.
    """
    d = seq.dim
    model = init_model if init_model is not None else BendModel.init(d, hidden=tuple(config.hidden), rng=rng)
    opt = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    sizes = np.array([min(seq.samples(i).shape[0], seq.samples(j).shape[0]) for i, j in pairs])
    total = int(sizes.sum())
    steps = max(1, int(np.ceil(total / config.batch_size)))
    weights_p = sizes / sizes.sum()

    best = np.inf
    best_params = None
    bad_epochs = 0
    plateau_bad = 0
    skipped = 0
    curve = []
    for _ in range(int(config.epochs)):
        epoch_loss = 0.0
        n_ok = 0
        for _ in range(steps):
            pick = rng.choice(len(pairs), size=config.batch_size, p=weights_p)
            x0_parts, x1_parts = [], []
            for pid in np.unique(pick):
                count = int(np.sum(pick == pid))
                i, j = pairs[pid]
                a, b = couple(config.coupling, seq.samples(i), seq.samples(j), count, rng)
                x0_parts.append(a)
                x1_parts.append(b)
            x0 = np.vstack(x0_parts)
            x1 = np.vstack(x1_parts)
            loss, grads = _energy_loss_and_grads(model, metric, x0, x1, config.n_energy_points)
            if not np.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in grads):
                skipped += 1
                continue
            adamw_step(opt, model.net.parameters(), grads)
            epoch_loss += loss
            n_ok += 1
        epoch_loss = epoch_loss / n_ok if n_ok else np.inf
        if epoch_loss < best - 1e-12:
            best = epoch_loss
            best_params = [p.copy() for p in model.net.parameters()]
            bad_epochs = 0
            plateau_bad = 0
        else:
            bad_epochs += 1
            plateau_bad += 1
            if plateau_bad > config.plateau_patience:
                opt.lr *= config.plateau_factor
                plateau_bad = 0
        curve.append(best)
        if bad_epochs > config.early_stop_patience:
            break
    if best_params is not None:
        for p, bp in zip(model.net.parameters(), best_params):
            p[...] = bp
    model.loss_curve_ = curve
    model.skipped_batches_ = skipped
    return model
