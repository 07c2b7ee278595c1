"""Minimal differentiable-MLP substrate.

Plain-numpy MLPs with hand-written backpropagation, an AdamW optimizer,
sinusoidal time features, and the softmax / entropy / Gumbel-Softmax
utilities used by the routing layer.  Everything is float64 and all
randomness enters through an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import as_vector, check_finite, check_positive, check_simplex

__all__ = [
    "Mlp",
    "mlp_forward",
    "mlp_gradients",
    "AdamWState",
    "adamw_step",
    "TimeEmbedding",
    "sinusoidal_time_embedding",
    "GumbelSchedule",
    "gumbel_softmax",
    "softmax",
    "log_sum_exp",
    "categorical_entropy",
    "ENTROPY_EPS",
]

# Epsilon used inside every log-of-probability term in the package.
ENTROPY_EPS = 1e-12

_ACTIVATIONS = ("relu", "tanh")


class Mlp:
    """Fully connected net with ReLU or Tanh hidden layers and a linear head.

    Parameters are float64 arrays; ``weights[i]`` has shape
    ``(layer_dims[i], layer_dims[i+1])``.  The output layer has no
    activation.
    """

    def __init__(self, layer_dims, weights, biases, activation="relu"):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or any(d <= 0 for d in layer_dims):
            raise ValueError(f"layer_dims must be >= 2 positive ints, got {layer_dims}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        if len(weights) != len(layer_dims) - 1 or len(biases) != len(weights):
            raise ValueError("parameter count does not match layer_dims")
        for i, (W, b) in enumerate(zip(weights, biases)):
            if W.shape != (layer_dims[i], layer_dims[i + 1]) or b.shape != (layer_dims[i + 1],):
                raise ValueError(f"layer {i} parameter shape mismatch")
        self.layer_dims = layer_dims
        self.weights = [np.asarray(W, dtype=np.float64) for W in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.activation = activation

    @classmethod
    def init(cls, layer_dims, activation="relu", rng=None, scale=1.0):
        """Seeded uniform fan-in init (Kaiming-style bound sqrt(6/fan_in))."""
        rng = rng if rng is not None else np.random.default_rng(0)
        weights, biases = [], []
        for din, dout in zip(layer_dims[:-1], layer_dims[1:]):
            bound = scale * np.sqrt(6.0 / din)
            weights.append(rng.uniform(-bound, bound, size=(din, dout)))
            biases.append(np.zeros(dout))
        return cls(layer_dims, weights, biases, activation)

    @classmethod
    def zeros(cls, layer_dims, activation="relu"):
        weights = [np.zeros((i, o)) for i, o in zip(layer_dims[:-1], layer_dims[1:])]
        biases = [np.zeros(o) for o in layer_dims[1:]]
        return cls(layer_dims, weights, biases, activation)

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def parameters(self):
        """Flat list of parameter arrays, weights and biases interleaved."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W)
            out.append(b)
        return out

    def _act(self, z):
        if self.activation == "relu":
            return np.maximum(z, 0.0)
        return np.tanh(z)

    def forward(self, X):
        """Batched forward pass: (N, in_dim) -> (N, out_dim)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.in_dim:
            raise ValueError(f"input dim {X.shape[1]} != expected {self.in_dim}")
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i != last:
                h = self._act(h)
        return h

    def forward_cached(self, X):
        """Forward pass that also returns the activations needed by backward."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.in_dim:
            raise ValueError(f"input dim {X.shape[1]} != expected {self.in_dim}")
        acts = [X]
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i != last:
                h = self._act(h)
            acts.append(h)
        return h, acts

    def backward(self, acts, upstream):
        """Backprop a (N, out_dim) upstream through the cached activations.

        Returns (param_grads, input_grad) where param_grads aligns with
        ``parameters()`` and input_grad has shape (N, in_dim).
        """
        up = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        n_layers = len(self.weights)
        grads = [None] * (2 * n_layers)
        for i in range(n_layers - 1, -1, -1):
            a_prev = acts[i]
            if i != n_layers - 1:
                a_out = acts[i + 1]
                if self.activation == "relu":
                    up = up * (a_out > 0.0)
                else:
                    up = up * (1.0 - a_out * a_out)
            grads[2 * i] = a_prev.T @ up
            grads[2 * i + 1] = up.sum(axis=0)
            up = up @ self.weights[i].T
        return grads, up

    def flat_params(self):
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat_params(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        off = 0
        for p in self.parameters():
            p[...] = flat[off : off + p.size].reshape(p.shape)
            off += p.size
        if off != flat.size:
            raise ValueError("flat parameter vector has wrong length")

    def copy(self):
        return Mlp(
            list(self.layer_dims),
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )


def mlp_forward(m: Mlp, x):
    """Evaluate the net on a single input vector."""
    x = as_vector(x)
    if x.shape[0] != m.in_dim:
        raise ValueError(f"input length {x.shape[0]} != expected {m.in_dim}")
    return m.forward(x[None, :])[0]


def mlp_gradients(m: Mlp, x, upstream):
    """Gradients of upstream . f(x) w.r.t. parameters and input.

    Returns (param_grads, input_grad); param_grads aligns with
    ``m.parameters()``.
    """
    x = check_finite(as_vector(x), "x")
    upstream = as_vector(upstream, "upstream")
    if upstream.shape[0] != m.out_dim:
        raise ValueError(f"upstream length {upstream.shape[0]} != output dim {m.out_dim}")
    _, acts = m.forward_cached(x[None, :])
    grads, dx = m.backward(acts, upstream[None, :])
    return grads, dx[0]


@dataclass
class AdamWState:
    """Decoupled-weight-decay Adam over a list of parameter arrays."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def ensure_moments(self, params):
        if not self.first_moment:
            self.first_moment = [np.zeros_like(p) for p in params]
            self.second_moment = [np.zeros_like(p) for p in params]


def adamw_step(state: AdamWState, params, grads):
    """One AdamW update, in place. Returns the updated parameter list."""
    if len(params) != len(grads):
        raise ValueError("params and grads must align")
    state.ensure_moments(params)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ValueError("gradient shape mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps_opt)
    return params


class TimeEmbedding:
    """Interleaved sin/cos features at geometric frequencies.

    Component pairs are (sin(2 pi f_j t), cos(2 pi f_j t)) with
    f_j = 2**j, so t=0 maps to (0, 1, 0, 1, ...).
    """

    def __init__(self, dim=16):
        dim = int(dim)
        if dim <= 0 or dim % 2 != 0:
            raise ValueError(f"time embedding dim must be even and positive, got {dim}")
        self.dim = dim
        self.frequencies = 2.0 ** np.arange(dim // 2)

    @property
    def max_frequency(self):
        return float(self.frequencies[-1])

    def embed(self, t):
        """(N,) times -> (N, dim) features; scalars give a (dim,) vector."""
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
        phase = 2.0 * np.pi * t_arr[:, None] * self.frequencies[None, :]
        out = np.empty((t_arr.shape[0], self.dim))
        out[:, 0::2] = np.sin(phase)
        out[:, 1::2] = np.cos(phase)
        if np.isscalar(t) or np.asarray(t).ndim == 0:
            return out[0]
        return out


def sinusoidal_time_embedding(e: TimeEmbedding, t):
    return e.embed(t)


@dataclass
class GumbelSchedule:
    """Temperature annealing and soft-warmup flags for the router."""

    tau_init: float = 1.0
    tau_min: float = 0.2
    tau_decay: float = 0.9995
    soft_epochs: int = 50

    def __post_init__(self):
        check_positive(self.tau_init, "tau_init")
        check_positive(self.tau_min, "tau_min")
        if not 0.0 < self.tau_decay <= 1.0:
            raise ValueError("tau_decay must lie in (0, 1]")
        if self.soft_epochs < 0:
            raise ValueError("soft_epochs must be non-negative")

    def tau_at(self, epoch):
        return max(self.tau_min, self.tau_init * self.tau_decay**epoch)

    def hard_at(self, epoch):
        return epoch >= self.soft_epochs


def log_sum_exp(x, axis=-1, keepdims=False):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out


def softmax(x, axis=-1):
    z = np.asarray(x, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sample_gumbel(shape, rng):
    """Gumbel(0,1) noise via -log(-log(u)) with clamped uniforms."""
    u = rng.uniform(size=shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_softmax_full(logits, tau, hard, rng):
    """Batched Gumbel-Softmax returning (forward weights, soft weights).

    Soft weights carry the straight-through gradient path; in hard mode the
    forward weights are exact one-hots at the argmax of the perturbed logits.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    noise = sample_gumbel(logits.shape, rng)
    perturbed = logits + noise
    soft = softmax(perturbed / tau, axis=1)
    if hard:
        idx = np.argmax(perturbed, axis=1)
        fwd = np.zeros_like(soft)
        fwd[np.arange(soft.shape[0]), idx] = 1.0
    else:
        fwd = soft
    return fwd, soft


def gumbel_softmax(logits, tau, hard=False, rng=None):
    """Single-vector Gumbel-Softmax sample on the simplex."""
    rng = rng if rng is not None else np.random.default_rng(0)
    logits = as_vector(logits, "logits")
    fwd, _ = gumbel_softmax_full(logits[None, :], tau, hard, rng)
    return fwd[0]


def categorical_entropy(w):
    """-sum w log(w + eps) for a simplex vector or batch of rows."""
    w = check_simplex(w)
    return -np.sum(w * np.log(w + ENTROPY_EPS), axis=-1)
