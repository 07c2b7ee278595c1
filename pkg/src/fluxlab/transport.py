"""Marginal sequences, endpoint couplings, and ODE integration.

Couplings pair samples from adjacent marginals (uniform, index-aligned, or
entropic OT); integration is explicit Euler over a shared time grid so that
split integrations compose bit-for-bit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .validation import as_matrix, check_positive

__all__ = [
    "MarginalSequence",
    "AccessLoggedSequence",
    "Coupling",
    "couple",
    "sinkhorn_plan",
    "time_grid",
    "euler_integrate",
    "pushforward_chain",
]


@dataclass
class MarginalSequence:
    """T ordered unpaired sample sets with normalized times.

    ``segment_ids`` and ``regime_labels`` are optional per-marginal
    annotations used only for evaluation.
    """

    marginals: list
    times: np.ndarray = None
    segment_ids: list = None
    regime_labels: list = None

    def __post_init__(self):
        if len(self.marginals) < 2:
            raise ValueError("a marginal sequence needs at least two marginals")
        self.marginals = [as_matrix(m, f"marginal {k}") for k, m in enumerate(self.marginals)]
        d = self.marginals[0].shape[1]
        if any(m.shape[1] != d for m in self.marginals):
            raise ValueError("all marginals must share the same dimension")
        if self.times is None:
            T = len(self.marginals)
            self.times = np.arange(T) / (T - 1)
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.times.shape != (len(self.marginals),):
            raise ValueError("times must have one entry per marginal")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.segment_ids is None:
            self.segment_ids = list(range(len(self.marginals)))
        if len(self.segment_ids) != len(self.marginals):
            raise ValueError("segment_ids must have one entry per marginal")
        if self.regime_labels is not None and len(self.regime_labels) != len(self.marginals):
            raise ValueError("regime_labels must have one entry per marginal")

    @property
    def T(self):
        return len(self.marginals)

    @property
    def dim(self):
        return self.marginals[0].shape[1]

    def sizes(self):
        return [m.shape[0] for m in self.marginals]

    def samples(self, k):
        """Sample matrix of marginal k; the accessor training code must use."""
        return self.marginals[k]

    def pooled(self, indices=None):
        indices = range(self.T) if indices is None else indices
        return np.vstack([self.samples(k) for k in indices])

    def subset(self, indices):
        """Sub-sequence at the given marginal indices, keeping original times."""
        indices = sorted(indices)
        return MarginalSequence(
            [self.samples(k).copy() for k in indices],
            times=self.times[indices],
            segment_ids=[self.segment_ids[k] for k in indices],
            regime_labels=None
            if self.regime_labels is None
            else [self.regime_labels[k] for k in indices],
        )


class AccessLoggedSequence(MarginalSequence):
    """Sequence view that records every marginal index read via samples()."""

    def __init__(self, seq: MarginalSequence):
        super().__init__(
            [m for m in seq.marginals],
            times=seq.times.copy(),
            segment_ids=list(seq.segment_ids),
            regime_labels=None if seq.regime_labels is None else list(seq.regime_labels),
        )
        self.accessed = set()

    def samples(self, k):
        self.accessed.add(int(k))
        return super().samples(k)


@dataclass
class Coupling:
    """Endpoint-pairing rule between two adjacent marginals."""

    kind: str = "random_perm"
    epsilon_sinkhorn: float = None  # None -> 0.05 * median cost
    max_sinkhorn_iter: int = 1000
    minibatch: int = 128

    def __post_init__(self):
        kinds = ("random_perm", "index_aligned", "sinkhorn_ot")
        if self.kind not in kinds:
            raise ValueError(f"coupling kind must be one of {kinds}")
        if self.epsilon_sinkhorn is not None:
            check_positive(self.epsilon_sinkhorn, "epsilon_sinkhorn")
        check_positive(self.max_sinkhorn_iter, "max_sinkhorn_iter")


def sinkhorn_plan(cost, epsilon=None, max_iter=1000, tol=1e-9):
    """Entropic OT plan between uniform marginals, log-domain scaling.

    Returns a plan whose rows sum to 1/n and columns to 1/m within ``tol``
    at convergence; warns and returns the last iterate otherwise.
    """
    C = as_matrix(cost, "cost")
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix must be finite")
    n, m = C.shape
    if n == 1 and m == 1:
        return np.array([[1.0]])
    if epsilon is None:
        med = float(np.median(C))
        epsilon = 0.05 * med if med > 0 else 1.0
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    f = np.zeros(n)
    g = np.zeros(m)
    K = -C / epsilon

    def _lse(M, axis):
        mx = M.max(axis=axis, keepdims=True)
        return (mx + np.log(np.exp(M - mx).sum(axis=axis, keepdims=True))).squeeze(axis)

    converged = False
    for _ in range(int(max_iter)):
        f = epsilon * (log_a - _lse(K + g[None, :] / epsilon, axis=1))
        g = epsilon * (log_b - _lse(K + f[:, None] / epsilon, axis=0))
        plan = np.exp(K + f[:, None] / epsilon + g[None, :] / epsilon)
        if np.abs(plan.sum(axis=1) - 1.0 / n).max() < tol:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"sinkhorn did not reach tolerance {tol} in {max_iter} iterations; "
            "using last iterate",
            RuntimeWarning,
        )
    return plan


def couple(cfg: Coupling, A, B, batch, rng):
    """Draw ``batch`` endpoint pairs (x0 from A, x1 from B) under ``cfg``."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    batch = int(batch)
    check_positive(batch, "batch")
    if cfg.kind == "random_perm":
        ia = rng.integers(0, A.shape[0], size=batch)
        ib = rng.integers(0, B.shape[0], size=batch)
    elif cfg.kind == "index_aligned":
        i = rng.integers(0, max(A.shape[0], B.shape[0]), size=batch)
        ia = i % A.shape[0]
        ib = i % B.shape[0]
    else:  # sinkhorn_ot
        m = min(A.shape[0], B.shape[0], max(cfg.minibatch, batch))
        sub_a = rng.choice(A.shape[0], size=m, replace=False) if m < A.shape[0] else np.arange(m)
        sub_b = rng.choice(B.shape[0], size=m, replace=False) if m < B.shape[0] else np.arange(m)
        Asub, Bsub = A[sub_a], B[sub_b]
        diff = Asub[:, None, :] - Bsub[None, :, :]
        cost = np.einsum("ijk,ijk->ij", diff, diff)
        plan = sinkhorn_plan(cost, cfg.epsilon_sinkhorn, cfg.max_sinkhorn_iter)
        p = plan.ravel()
        p = p / p.sum()
        flat = rng.choice(p.size, size=batch, p=p)
        ia = sub_a[flat // m]
        ib = sub_b[flat % m]
    return A[ia], B[ib]


def time_grid(t_start, t_end, n_steps):
    """Shared Euler grid; reusing slices of one grid composes bit-for-bit."""
    if not t_end > t_start:
        raise ValueError("t_end must exceed t_start")
    check_positive(n_steps, "n_steps")
    return np.linspace(t_start, t_end, int(n_steps) + 1)


def euler_integrate(velocity_fn, x0, t_start=None, t_end=None, n_steps=None, times=None):
    """Explicit Euler: x_{i+1} = x_i + dt * v(t_i, x_i) over a time grid.

    ``times`` overrides (t_start, t_end, n_steps) when given.  Samples whose
    state turns non-finite are marked diverged and frozen at their last
    finite state.

    Returns (trajectory, final, diverged) with trajectory of shape
    (len(times), N, d).
    """
    if times is None:
        times = time_grid(t_start, t_end, n_steps)
    times = np.asarray(times, dtype=np.float64)
    X = as_matrix(x0, "x0").copy()
    n = X.shape[0]
    diverged = np.zeros(n, dtype=bool)
    traj = np.empty((times.shape[0], n, X.shape[1]))
    traj[0] = X
    for i in range(times.shape[0] - 1):
        dt = times[i + 1] - times[i]
        v = np.asarray(velocity_fn(times[i], X), dtype=np.float64)
        X_next = X + dt * v
        diverged |= ~np.all(np.isfinite(X_next), axis=1)
        X_next[diverged] = X[diverged]
        X = X_next
        traj[i + 1] = X
    return traj, X, diverged


def pushforward_chain(velocity_fn, mu0, times, n_steps_per_segment=100, knots=None):
    """Integrate mu0 samples through every marginal time in ``times``.

    ``velocity_fn(t, X, source)`` must return local-pair tangents (velocity
    per unit of interpolation time within one training pair).  ``knots`` are
    the training-pair boundary times; the global-time rate is 1/span of the
    knot interval containing t, and the source state is refreshed whenever
    integration crosses a knot.

    Returns (generated, diverged) where generated[k] holds the sample set
    recorded at times[k].
    """
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.shape[0] < 2:
        raise ValueError("times must list at least two marginal times")
    if knots is None:
        knots = times
    knots = np.asarray(knots, dtype=np.float64)
    X = as_matrix(mu0, "mu0").copy()
    n = X.shape[0]
    diverged = np.zeros(n, dtype=bool)
    generated = [X.copy()]
    source = X.copy()
    last_knot = 0

    def _rate_and_knot(t):
        j = int(np.searchsorted(knots, t + 1e-12) - 1)
        j = min(max(j, 0), knots.shape[0] - 2)
        return 1.0 / (knots[j + 1] - knots[j]), j

    for k in range(times.shape[0] - 1):
        grid = time_grid(times[k], times[k + 1], n_steps_per_segment)
        for i in range(grid.shape[0] - 1):
            t = grid[i]
            rate, j = _rate_and_knot(t)
            if j > last_knot:
                source = X.copy()
                last_knot = j
            dt = grid[i + 1] - grid[i]
            v = np.asarray(velocity_fn(t, X, source), dtype=np.float64)
            X_next = X + (dt * rate) * v
            diverged |= ~np.all(np.isfinite(X_next), axis=1)
            X_next[diverged] = X[diverged]
            X = X_next
        generated.append(X.copy())
    return generated, diverged
