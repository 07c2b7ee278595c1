"""Estimator facade.

Wraps the three-stage pipeline behind a fit/predict surface: ``fit`` takes
pooled samples with their marginal indices, ``predict`` returns the hard
expert (regime) label at a time, and ``transform`` pushes samples through
the learned chain to the final time.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .bend import BendTrainConfig, train_bend
from .evaluate import model_chain_field, regime_report
from .geometry import GeometryTrainConfig, train_geometry
from .nn import softmax
from .pipeline import Scaler, _seed_rngs
from .transport import Coupling, MarginalSequence, pushforward_chain
from .validation import as_matrix
from .velocity import GumbelSchedule, PenaltyWeights, VelocityTrainConfig, train_velocity

__all__ = ["FluxEstimator"]


class FluxEstimator(BaseEstimator):
    """Geometry-aware longitudinal mixture velocity model.

    Parameters mirror the per-dataset hyperparameter defaults; set
    ``use_geometry=False`` for the Euclidean ablation.
    """

    def __init__(
        self,
        n_experts=2,
        expert_hidden=(8, 8),
        router_hidden=(64, 64),
        time_dim=16,
        use_geometry=True,
        geometry_epochs=50,
        bend_epochs=100,
        velocity_epochs=180,
        batch_size=32,
        lr=1e-4,
        weight_decay=1e-5,
        n_centers=128,
        feature_dim=32,
        coupling="index_aligned",
        source_conditioning=True,
        standardize=True,
        n_steps_per_segment=100,
        seed=0,
    ):
        self.n_experts = n_experts
        self.expert_hidden = expert_hidden
        self.router_hidden = router_hidden
        self.time_dim = time_dim
        self.use_geometry = use_geometry
        self.geometry_epochs = geometry_epochs
        self.bend_epochs = bend_epochs
        self.velocity_epochs = velocity_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.n_centers = n_centers
        self.feature_dim = feature_dim
        self.coupling = coupling
        self.source_conditioning = source_conditioning
        self.standardize = standardize
        self.n_steps_per_segment = n_steps_per_segment
        self.seed = seed

    def _sequence(self, X, marginal_index, regime_labels=None):
        X = as_matrix(X, "X")
        marginal_index = np.asarray(marginal_index, dtype=np.int64)
        if marginal_index.shape[0] != X.shape[0]:
            raise ValueError("marginal_index must have one entry per row of X")
        ks = sorted(set(marginal_index.tolist()))
        if ks != list(range(len(ks))):
            raise ValueError("marginal indices must be contiguous from 0")
        marginals = [X[marginal_index == k] for k in ks]
        return MarginalSequence(marginals, regime_labels=regime_labels)

    def fit(self, X, marginal_index, regime_labels=None):
        """Train geometry, bend, and velocity stages on (samples, marginal
        index) data."""
        seq = self._sequence(X, marginal_index, regime_labels)
        rngs = _seed_rngs(self.seed, ["geometry", "bend", "velocity"])
        scaler = Scaler.fit(seq.pooled()) if self.standardize else Scaler.identity(seq.dim)
        std_seq = scaler.transform_seq(seq)
        pairs = [(k, k + 1) for k in range(std_seq.T - 1)]
        coupling = Coupling(kind=self.coupling)

        metric = None
        bend = None
        if self.use_geometry:
            gcfg = GeometryTrainConfig(
                epochs=self.geometry_epochs, batch_size=self.batch_size, lr=self.lr,
                weight_decay=self.weight_decay, n_centers=self.n_centers,
                feature_dim=self.feature_dim,
            )
            metric = train_geometry(std_seq.pooled(), gcfg, rng=rngs["geometry"])
            bcfg = BendTrainConfig(
                epochs=self.bend_epochs, batch_size=self.batch_size, lr=self.lr,
                weight_decay=self.weight_decay, coupling=coupling,
            )
            bend = train_bend(std_seq, pairs, metric, bcfg, rngs["bend"])

        vcfg = VelocityTrainConfig(
            epochs=self.velocity_epochs, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, n_experts=self.n_experts,
            expert_hidden=tuple(self.expert_hidden), router_hidden=tuple(self.router_hidden),
            time_dim=self.time_dim, gumbel=GumbelSchedule(), penalties=PenaltyWeights(),
            coupling=coupling, source_conditioning=self.source_conditioning,
        )
        model, log = train_velocity(std_seq, pairs, bend, metric, vcfg, rngs["velocity"])
        self.scaler_ = scaler
        self.metric_ = metric
        self.bend_ = bend
        self.model_ = model
        self.train_log_ = log
        self.times_ = std_seq.times
        return self

    def predict(self, X, t):
        """Hard expert (regime) label of each sample at time t."""
        self._check_fitted()
        Xs = self.scaler_.transform(as_matrix(X, "X"))
        if self.model_.n_experts == 1:
            return np.zeros(Xs.shape[0], dtype=np.int64)
        logits = self.model_.logits(t, Xs, Xs if self.model_.source_conditioning else None)
        return np.argmax(logits, axis=1)

    def predict_proba(self, X, t):
        """Router probabilities (pre-Gumbel softmax) at time t."""
        self._check_fitted()
        Xs = self.scaler_.transform(as_matrix(X, "X"))
        if self.model_.n_experts == 1:
            return np.ones((Xs.shape[0], 1))
        return softmax(self.model_.logits(t, Xs, Xs if self.model_.source_conditioning else None), axis=1)

    def transform(self, X):
        """Push samples from the first marginal time to the final time."""
        self._check_fitted()
        Xs = self.scaler_.transform(as_matrix(X, "X"))
        field = model_chain_field(self.model_)
        gen, _ = pushforward_chain(
            field, Xs, self.times_, self.n_steps_per_segment, knots=self.model_.time_knots_
        )
        return self.scaler_.inverse(gen[-1])

    def push_forward(self, X):
        """Generated sample sets at every marginal time."""
        self._check_fitted()
        Xs = self.scaler_.transform(as_matrix(X, "X"))
        field = model_chain_field(self.model_)
        gen, _ = pushforward_chain(
            field, Xs, self.times_, self.n_steps_per_segment, knots=self.model_.time_knots_
        )
        return [self.scaler_.inverse(g) for g in gen]

    def regime_metrics(self, X, marginal_index, regime_labels):
        """Segment ARI/NMI and routing statistics on labeled data."""
        self._check_fitted()
        seq = self._sequence(X, marginal_index, regime_labels)
        return regime_report(self.model_, self.scaler_.transform_seq(seq))

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("estimator is not fitted; call fit first")
