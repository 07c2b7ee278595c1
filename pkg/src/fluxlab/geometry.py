"""Stage-0 geometry backends.

A manifold score h(x) in (0, 1) is the logistic of a calibrated
log-sum-exp of RBF kernel mass around learned centers; the scalar path
metric is M(x) = (h(x) + eps)^(-alpha), so off-manifold points are
expensive to traverse.  Ambient dimension below 5 uses kernels directly in
the observed coordinates; higher dimensions first learn a feature map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .nn import AdamWState, Mlp, adamw_step
from .validation import as_matrix, check_finite, check_positive

__all__ = [
    "kmeans",
    "KMeansResult",
    "GeometryTrainConfig",
    "RbfMetricModel",
    "DeepKernelMetricModel",
    "train_geometry",
    "manifold_score",
    "metric_scalar",
]

# Euclidean diameter assumed for the reference mesh behind the
# 10*sqrt(D/3) bandwidth rule; other datasets scale by diameter ratio.
REFERENCE_DIAMETER = 250.0


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    inertia: float


def _kmeanspp_init(X, k, rng):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    first = rng.integers(0, n)
    centers[0] = X[first]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(0, n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers[j] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centers[j]) ** 2, axis=1))
    return centers


def kmeans(points, k, max_iter=100, rng=None, tol=1e-12):
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded from the point farthest from its assigned
    center.  The objective is non-increasing across iterations.
    """
    X = as_matrix(points, "points")
    rng = rng if rng is not None else np.random.default_rng(0)
    k = int(k)
    check_positive(k, "k")
    if k > X.shape[0]:
        raise ValueError(f"k={k} exceeds number of points {X.shape[0]}")
    centers = _kmeanspp_init(X, k, rng)
    prev_inertia = np.inf
    assignments = None
    for _ in range(int(max_iter)):
        d2 = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assignments = np.argmin(d2, axis=1)
        point_d2 = d2[np.arange(X.shape[0]), assignments]
        for j in range(k):
            mask = assignments == j
            if not np.any(mask):
                far = int(np.argmax(point_d2))
                centers[j] = X[far]
                assignments[far] = j
                point_d2[far] = 0.0
            else:
                centers[j] = X[mask].mean(axis=0)
        d2 = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assignments = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(X.shape[0]), assignments].sum())
        if prev_inertia - inertia <= tol:
            prev_inertia = min(prev_inertia, inertia)
            break
        prev_inertia = inertia
    return KMeansResult(centers, assignments, prev_inertia)


@dataclass
class GeometryTrainConfig:
    """Knobs shared by both metric backends."""

    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-5
    negative_ratio: float = 1.0
    early_stop_patience: int = 30
    n_centers: int = 128
    feature_dim: int = 32
    hidden: tuple = (64, 64)
    eps_metric: float = 1e-2
    alpha: float = 1.0
    bandwidth: float = None  # None -> backend-specific rule
    backend: str = "auto"  # auto | rbf | deep

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.backend not in ("auto", "rbf", "deep"):
            raise ValueError("backend must be auto, rbf, or deep")


def _logistic(u):
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    # keep the score strictly inside (0, 1) under float underflow
    return np.clip(out, 1e-300, np.nextafter(1.0, 0.0))


def _kernel_log_mass(Z, centers, sigma):
    """log sum_m exp(-||z - c_m||^2 / (2 sigma^2)) with its softmax weights."""
    d2 = (
        np.sum(Z * Z, axis=1)[:, None]
        + np.sum(centers * centers, axis=1)[None, :]
        - 2.0 * Z @ centers.T
    )
    np.maximum(d2, 0.0, out=d2)
    logits = -d2 / (2.0 * sigma * sigma)
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    s = e.sum(axis=1, keepdims=True)
    lse = (mx + np.log(s)).ravel()
    p = e / s
    return lse, p


def _fit_calibration(lse, target_median=0.9, mid_quantile=0.1):
    """Pick (a, b) so the median data score is target_median and the lower
    quantile of on-data kernel mass maps to score 0.5."""
    med = float(np.median(lse))
    lo = float(np.quantile(lse, mid_quantile))
    target_logit = np.log(target_median / (1.0 - target_median))
    spread = med - lo
    a = target_logit / spread if spread > 1e-12 else 1.0
    b = target_logit - a * med
    return a, b


class RbfMetricModel(BaseEstimator):
    """Direct RBF metric for low-dimensional observations (d < 5)."""

    def __init__(
        self,
        n_centers=100,
        bandwidth=None,
        eps_metric=1e-2,
        alpha=1.0,
        target_median_score=0.9,
        seed=0,
    ):
        self.n_centers = n_centers
        self.bandwidth = bandwidth
        self.eps_metric = eps_metric
        self.alpha = alpha
        self.target_median_score = target_median_score
        self.seed = seed

    def fit(self, X, y=None):
        X = check_finite(as_matrix(X), "X")
        if np.all(X.std(axis=0) <= 0):
            raise ValueError("degenerate data: zero variance in all dimensions")
        rng = np.random.default_rng(self.seed)
        k = min(int(self.n_centers), X.shape[0])
        self.centers_ = kmeans(X, k, rng=rng).centers
        if self.bandwidth is not None:
            self.bandwidth_ = float(self.bandwidth)
        else:
            span = X.max(axis=0) - X.min(axis=0)
            diam = float(np.linalg.norm(span))
            d = X.shape[1]
            self.bandwidth_ = 10.0 * np.sqrt(d / 3.0) * diam / REFERENCE_DIAMETER
        lse, _ = _kernel_log_mass(X, self.centers_, self.bandwidth_)
        self.a_, self.b_ = _fit_calibration(lse, self.target_median_score)
        return self

    def _features(self, X):
        return X

    def manifold_score(self, X):
        X = as_matrix(np.atleast_2d(X))
        lse, _ = _kernel_log_mass(self._features(X), self.centers_, self.bandwidth_)
        return _logistic(self.a_ * lse + self.b_)

    def metric_scalar(self, X):
        h = self.manifold_score(X)
        return (h + self.eps_metric) ** (-self.alpha)

    def score_with_input_grad(self, X):
        """Returns (h, dh/dx) for a batch."""
        X = as_matrix(np.atleast_2d(X))
        Z = self._features(X)
        lse, p = _kernel_log_mass(Z, self.centers_, self.bandwidth_)
        h = _logistic(self.a_ * lse + self.b_)
        coef = (h * (1.0 - h) * self.a_ / (self.bandwidth_**2))[:, None]
        dz = coef * (p @ self.centers_ - Z)
        return h, self._grad_to_input(X, dz)

    def _grad_to_input(self, X, dz):
        return dz

    def metric_input_grad(self, X):
        h, dh = self.score_with_input_grad(X)
        coef = -self.alpha * (h + self.eps_metric) ** (-self.alpha - 1.0)
        return coef[:, None] * dh

    def to_dict(self):
        return {
            "backend": "rbf",
            "centers": self.centers_,
            "bandwidth": self.bandwidth_,
            "a": self.a_,
            "b": self.b_,
            "eps_metric": self.eps_metric,
            "alpha": self.alpha,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        model = cls(
            n_centers=d["centers"].shape[0],
            eps_metric=d["eps_metric"],
            alpha=d["alpha"],
            seed=d["seed"],
        )
        model.centers_ = np.asarray(d["centers"], dtype=np.float64)
        model.bandwidth_ = float(d["bandwidth"])
        model.a_ = float(d["a"])
        model.b_ = float(d["b"])
        return model


class DeepKernelMetricModel(BaseEstimator):
    """RBF-MLP deep-kernel metric for ambient dimension >= 5.

    A feature map compresses observations before the kernel score; the map,
    centers, and scalar calibration are trained jointly by discriminating
    pooled data against uniform negatives from the 1.5x-inflated bounding
    box (cross-entropy on the score).
    """

    def __init__(
        self,
        feature_dim=32,
        n_centers=128,
        hidden=(64, 64),
        epochs=50,
        batch_size=32,
        lr=1e-4,
        weight_decay=1e-5,
        negative_ratio=1.0,
        early_stop_patience=30,
        eps_metric=1e-2,
        alpha=1.0,
        seed=0,
    ):
        self.feature_dim = feature_dim
        self.n_centers = n_centers
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.negative_ratio = negative_ratio
        self.early_stop_patience = early_stop_patience
        self.eps_metric = eps_metric
        self.alpha = alpha
        self.seed = seed

    def _params(self):
        return self.net_.parameters() + [self.centers_, self.a_, self.b_]

    def fit(self, X, y=None):
        X = check_finite(as_matrix(X), "X")
        if np.all(X.std(axis=0) <= 0):
            raise ValueError("degenerate data: zero variance in all dimensions")
        rng = np.random.default_rng(self.seed)
        d = X.shape[1]
        dims = [d, *self.hidden, int(self.feature_dim)]
        self.net_ = Mlp.init(dims, activation="relu", rng=rng)

        Z = self.net_.forward(X)
        k = min(int(self.n_centers), X.shape[0])
        self.centers_ = kmeans(Z, k, rng=rng).centers.copy()
        sub = Z if Z.shape[0] <= 512 else Z[rng.choice(Z.shape[0], 512, replace=False)]
        diffs = sub[:, None, :] - sub[None, :, :]
        pd = np.sqrt(np.einsum("ijk,ijk->ij", diffs, diffs))
        med = float(np.median(pd[np.triu_indices_from(pd, k=1)])) if sub.shape[0] > 1 else 0.0
        self.bandwidth_ = med if med > 0 else 1.0
        self.a_ = np.array([1.0])
        self.b_ = np.array([0.0])

        lo, hi = X.min(axis=0), X.max(axis=0)
        center = 0.5 * (lo + hi)
        half = 0.75 * (hi - lo)  # 1.5x-inflated box
        half = np.maximum(half, 1e-6)
        n_neg = max(1, int(round(self.negative_ratio * X.shape[0])))

        opt = AdamWState(lr=self.lr, weight_decay=self.weight_decay)
        best_loss = np.inf
        best_params = None
        bad_epochs = 0
        self.loss_curve_ = []
        for _ in range(int(self.epochs)):
            negs = center + rng.uniform(-1.0, 1.0, size=(n_neg, d)) * half
            data = np.vstack([X, negs])
            labels = np.concatenate([np.ones(X.shape[0]), np.zeros(n_neg)])
            order = rng.permutation(data.shape[0])
            epoch_loss = 0.0
            n_batches = 0
            for start in range(0, data.shape[0], int(self.batch_size)):
                idx = order[start : start + int(self.batch_size)]
                loss = self._train_batch(data[idx], labels[idx], opt)
                epoch_loss += loss
                n_batches += 1
            epoch_loss /= max(n_batches, 1)
            self.loss_curve_.append(epoch_loss)
            if epoch_loss < best_loss - 1e-12:
                best_loss = epoch_loss
                best_params = [p.copy() for p in self._params()]
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs > self.early_stop_patience:
                    break
        if best_params is not None:
            for p, bp in zip(self._params(), best_params):
                p[...] = bp
        return self

    def _train_batch(self, Xb, yb, opt):
        out, acts = self.net_.forward_cached(Xb)
        lse, p = _kernel_log_mass(out, self.centers_, self.bandwidth_)
        u = self.a_[0] * lse + self.b_[0]
        h = _logistic(u)
        tiny = 1e-12
        loss = -np.mean(yb * np.log(h + tiny) + (1.0 - yb) * np.log(1.0 - h + tiny))

        B = Xb.shape[0]
        du = (h - yb) / B
        da = np.array([np.sum(du * lse)])
        db = np.array([np.sum(du)])
        dlse = du * self.a_[0]
        # d lse / d d2_im = -p_im / (2 sigma^2); d2 = ||z - c||^2
        dd2 = -(dlse[:, None] * p) / (2.0 * self.bandwidth_**2)
        dz = 2.0 * (dd2.sum(axis=1, keepdims=True) * out - dd2 @ self.centers_)
        dcenters = 2.0 * (dd2.sum(axis=0)[:, None] * self.centers_ - dd2.T @ out)
        net_grads, _ = self.net_.backward(acts, dz)
        adamw_step(opt, self._params(), net_grads + [dcenters, da, db])
        return float(loss)

    def _features(self, X):
        return self.net_.forward(X)

    def manifold_score(self, X):
        X = as_matrix(np.atleast_2d(X))
        lse, _ = _kernel_log_mass(self._features(X), self.centers_, self.bandwidth_)
        return _logistic(self.a_[0] * lse + self.b_[0])

    def metric_scalar(self, X):
        h = self.manifold_score(X)
        return (h + self.eps_metric) ** (-self.alpha)

    def score_with_input_grad(self, X):
        X = as_matrix(np.atleast_2d(X))
        Z, acts = self.net_.forward_cached(X)
        lse, p = _kernel_log_mass(Z, self.centers_, self.bandwidth_)
        h = _logistic(self.a_[0] * lse + self.b_[0])
        coef = (h * (1.0 - h) * self.a_[0] / (self.bandwidth_**2))[:, None]
        dz = coef * (p @ self.centers_ - Z)
        _, dx = self.net_.backward(acts, dz)
        return h, dx

    def metric_input_grad(self, X):
        h, dh = self.score_with_input_grad(X)
        coef = -self.alpha * (h + self.eps_metric) ** (-self.alpha - 1.0)
        return coef[:, None] * dh

    def to_dict(self):
        return {
            "backend": "deep",
            "layer_dims": list(self.net_.layer_dims),
            "activation": self.net_.activation,
            "net_params": self.net_.flat_params(),
            "centers": self.centers_,
            "bandwidth": self.bandwidth_,
            "a": self.a_,
            "b": self.b_,
            "eps_metric": self.eps_metric,
            "alpha": self.alpha,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        model = cls(
            feature_dim=d["layer_dims"][-1],
            n_centers=d["centers"].shape[0],
            eps_metric=d["eps_metric"],
            alpha=d["alpha"],
            seed=d["seed"],
        )
        model.net_ = Mlp.zeros(d["layer_dims"], activation=d["activation"])
        model.net_.set_flat_params(d["net_params"])
        model.centers_ = np.asarray(d["centers"], dtype=np.float64)
        model.bandwidth_ = float(d["bandwidth"])
        model.a_ = np.asarray(d["a"], dtype=np.float64)
        model.b_ = np.asarray(d["b"], dtype=np.float64)
        return model


def train_geometry(pooled, config: GeometryTrainConfig, rng=None, seed=None):
    """Fit the metric backend selected by the ambient-dimension rule.

    d < 5 uses the direct RBF backend; d >= 5 the deep-kernel backend.
    """
    X = as_matrix(pooled, "pooled")
    if seed is None:
        seed = int(rng.integers(0, 2**31 - 1)) if rng is not None else 0
    backend = config.backend
    if backend == "auto":
        backend = "rbf" if X.shape[1] < 5 else "deep"
    if backend == "rbf":
        model = RbfMetricModel(
            n_centers=config.n_centers,
            bandwidth=config.bandwidth,
            eps_metric=config.eps_metric,
            alpha=config.alpha,
            seed=seed,
        )
    else:
        model = DeepKernelMetricModel(
            feature_dim=config.feature_dim,
            n_centers=config.n_centers,
            hidden=tuple(config.hidden),
            epochs=config.epochs,
            batch_size=config.batch_size,
            lr=config.lr,
            weight_decay=config.weight_decay,
            negative_ratio=config.negative_ratio,
            early_stop_patience=config.early_stop_patience,
            eps_metric=config.eps_metric,
            alpha=config.alpha,
            seed=seed,
        )
    return model.fit(X)


def manifold_score(metric, x):
    """Score in (0, 1); high near the data manifold."""
    return metric.manifold_score(np.atleast_2d(x)).squeeze()


def metric_scalar(metric, x):
    """(h + eps)^(-alpha); strictly decreasing in the manifold score."""
    return metric.metric_scalar(np.atleast_2d(x)).squeeze()


def metric_from_dict(d):
    if d["backend"] == "rbf":
        return RbfMetricModel.from_dict(d)
    return DeepKernelMetricModel.from_dict(d)
