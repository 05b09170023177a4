"""Robust mean estimators and warm-up aggregation rules.

Estimators (coordinate median, trimmed mean, spectral filtering) feed the
detection scores.  Aggregation rules are simplified single-loop versions of
self-centered clipping, IOS, BALANCE and UBAR, used only to produce a
near-consensual starting point before detection.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from .problem import AttackSpec, NodeDataset, apply_message_attack, stack_datasets, stacked_gradients
from .rng import Phase, stream

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- estimators


@dataclass(frozen=True)
class CoordinateMedian:
    kind = "median"


@dataclass(frozen=True)
class TrimmedMean:
    fraction: float = 0.1
    kind = "trimmed"

    def __post_init__(self):
        if not 0.0 <= self.fraction < 0.5:
            raise ValueError(f"trimming fraction must lie in [0, 0.5), got {self.fraction}")


@dataclass(frozen=True)
class Filtering:
    eps: float = 0.2
    kind = "filtering"

    def __post_init__(self):
        if not 0.0 <= self.eps < 0.5:
            raise ValueError(f"contamination level must lie in [0, 0.5), got {self.eps}")


RobustMeanEstimator = Union[CoordinateMedian, TrimmedMean, Filtering]
ESTIMATORS = {cls.kind: cls for cls in (CoordinateMedian, TrimmedMean, Filtering)}


def _as_matrix(vectors) -> np.ndarray:
    arr = np.asarray(vectors, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] == 0:
        raise ValueError("need at least one vector")
    return arr


def coordinate_median(vectors) -> np.ndarray:
    return np.median(_as_matrix(vectors), axis=0)


def trimmed_mean(vectors, fraction: float) -> np.ndarray:
    arr = np.sort(_as_matrix(vectors), axis=0)
    k = int(math.floor(fraction * arr.shape[0]))
    return arr[k : arr.shape[0] - k].mean(axis=0)


def filtering_weights(vectors, eps: float) -> np.ndarray:
    """Soft spectral filter weights (sum to one).

    Each round finds the top eigenvector of the weighted covariance and shrinks
    every weight by ``1 - tau_j / max tau``, where ``tau_j`` is the squared
    projection of point ``j`` on that direction.  Stops when the top eigenvalue
    drops by less than 1%, or after ``ceil(eps * n) + 1`` rounds.
    """
    if not 0.0 <= eps < 0.5:
        raise ValueError(f"contamination level must lie in [0, 0.5), got {eps}")
    x = _as_matrix(vectors)
    n = x.shape[0]
    w = np.full(n, 1.0 / n)
    if eps == 0 or n < 2:
        return w

    def top(weights):
        mu = weights @ x
        centered = x - mu
        cov = (centered * weights[:, None]).T @ centered
        vals, vecs = np.linalg.eigh(cov)
        return vals[-1], vecs[:, -1], centered

    lam, u, centered = top(w)
    for _ in range(math.ceil(eps * n) + 1):
        tau = (centered @ u) ** 2
        if lam <= 0 or tau.max() <= 0:
            break
        cand = w * (1.0 - tau / tau.max())
        if cand.sum() <= 0:
            break
        cand /= cand.sum()
        lam_new, u_new, centered_new = top(cand)
        if lam_new >= lam:
            break
        w, improved = cand, lam_new < 0.99 * lam
        lam, u, centered = lam_new, u_new, centered_new
        if not improved:
            break
    return w


def filtering_mean(vectors, eps: float) -> np.ndarray:
    x = _as_matrix(vectors)
    if x.shape[0] < 2:
        raise ValueError("filtering needs at least two vectors")
    return filtering_weights(x, eps) @ x


def robust_mean(estimator: RobustMeanEstimator, vectors) -> np.ndarray:
    if isinstance(estimator, CoordinateMedian):
        return coordinate_median(vectors)
    if isinstance(estimator, TrimmedMean):
        return trimmed_mean(vectors, estimator.fraction)
    if isinstance(estimator, Filtering):
        vecs = _as_matrix(vectors)
        return vecs[0].copy() if vecs.shape[0] == 1 else filtering_mean(vecs, estimator.eps)
    raise TypeError(f"unknown estimator {estimator!r}")


# ---------------------------------------------------------------- warm-up rules


@dataclass(frozen=True)
class Average:
    kind = "average"


@dataclass(frozen=True)
class CenteredClip:
    tau: float = 0.1
    rounds: int = 1
    kind = "centered_clip"

    def __post_init__(self):
        if not self.tau > 0 or self.rounds < 1:
            raise ValueError("CenteredClip needs tau > 0 and rounds >= 1")


@dataclass(frozen=True)
class IosRemove:
    b: int = 2
    kind = "ios"

    def __post_init__(self):
        if self.b < 1:
            raise ValueError("IosRemove needs b >= 1")


@dataclass(frozen=True)
class BalanceDecay:
    """Accept neighbors within ``gamma * exp(-kappa * progress) * ||theta_i||``."""

    gamma: float = 1.0
    kappa: float = 1.0
    kind = "balance"

    def __post_init__(self):
        if not (self.gamma > 0 and self.kappa > 0):
            raise ValueError("BalanceDecay needs gamma > 0 and kappa > 0")


@dataclass(frozen=True)
class UbarSelect:
    b: int = 5
    kind = "ubar"

    def __post_init__(self):
        if self.b < 1:
            raise ValueError("UbarSelect needs b >= 1")


WarmupRule = Union[Average, CenteredClip, IosRemove, BalanceDecay, UbarSelect]
RULES = {cls.kind: cls for cls in (Average, CenteredClip, IosRemove, BalanceDecay, UbarSelect)}


def _clip(v: np.ndarray, tau: float) -> np.ndarray:
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if math.isinf(tau):
        return v
    scale = np.minimum(1.0, tau / np.maximum(norms, 1e-300))
    return v * scale


def _weighted(points: np.ndarray, weights: np.ndarray, keep: np.ndarray) -> np.ndarray:
    w = weights[keep]
    return (w / w.sum()) @ points[keep]


def warmup_aggregate(
    rule: WarmupRule,
    self_theta: np.ndarray,
    neighbor_thetas: Sequence[np.ndarray] | np.ndarray,
    weights: np.ndarray | None = None,
    losses: np.ndarray | None = None,
    progress: float = 0.0,
) -> np.ndarray:
    """Aggregate ``[self] + neighbors`` under ``rule``.

    ``weights`` and ``losses`` are indexed like ``[self, *neighbors]``;
    weights default to uniform and are renormalized over whatever survives.
    ``losses`` (UBAR only) are the candidate models' losses on the local batch;
    ``progress`` (BALANCE only) is the fraction of the warm-up already done.
    """
    neigh = np.asarray(neighbor_thetas, dtype=float).reshape(-1, np.size(self_theta))
    if neigh.shape[0] == 0:
        raise ValueError("need at least one neighbor")
    pts = np.vstack([np.asarray(self_theta, dtype=float)[None, :], neigh])
    w = np.full(pts.shape[0], 1.0 / pts.shape[0]) if weights is None else np.asarray(weights, float)
    keep = np.ones(pts.shape[0], dtype=bool)

    if isinstance(rule, Average):
        return _weighted(pts, w, keep)

    if isinstance(rule, CenteredClip):
        center = pts[0].copy()
        wn = w / w.sum()
        for _ in range(rule.rounds):
            center = center + wn @ _clip(pts - center, rule.tau)
        return center

    if isinstance(rule, (IosRemove, UbarSelect)) and rule.b >= neigh.shape[0]:
        raise ValueError(f"b={rule.b} must be below the neighbor count {neigh.shape[0]}")

    if isinstance(rule, IosRemove):
        for _ in range(rule.b):
            mu = _weighted(pts, w, keep)
            dist = np.linalg.norm(pts - mu, axis=1)
            dist[~keep] = -np.inf
            dist[0] = -np.inf  # self is never removed
            keep[int(np.argmax(dist))] = False  # ties: lowest index
        return _weighted(pts, w, keep)

    if isinstance(rule, BalanceDecay):
        radius = rule.gamma * math.exp(-rule.kappa * progress) * np.linalg.norm(pts[0])
        keep[1:] = np.linalg.norm(neigh - pts[0], axis=1) <= radius
        return _weighted(pts, w, keep)

    if isinstance(rule, UbarSelect):
        if losses is None:
            raise ValueError("UbarSelect needs candidate losses")
        losses = np.asarray(losses, dtype=float)
        dist = np.linalg.norm(neigh - pts[0], axis=1)
        closest = np.argsort(dist, kind="stable")[: rule.b] + 1
        keep[1:] = False
        if closest.size:
            good = closest[losses[closest] <= losses[0]]
            if good.size == 0:
                good = closest[[int(np.argmin(losses[closest]))]]
            keep[good] = True
        return _weighted(pts, w, keep)

    raise TypeError(f"unknown warm-up rule {rule!r}")


# ---------------------------------------------------------------- warm-up run


@dataclass
class WarmupResult:
    thetas: np.ndarray
    consensus_trace: np.ndarray  # sum over normal nodes of ||theta_j - mean||^2, k = 0..k0
    eta: float


def consensus_error(thetas: np.ndarray, nodes: Sequence[int] | np.ndarray) -> float:
    sub = thetas[np.asarray(nodes, dtype=int)]
    return float(np.sum((sub - sub.mean(axis=0)) ** 2))


def default_warmup_eta(k0: int) -> float:
    return 0.5 / math.sqrt(max(k0, 1))


def run_warmup(
    w: np.ndarray,
    datasets: Sequence[NodeDataset],
    rule: WarmupRule,
    k0: int,
    eta: float | None = None,
    batch_size: int = 10,
    attack: AttackSpec | None = None,
    seed: int = 0,
    theta0: np.ndarray | None = None,
) -> WarmupResult:
    """Decentralized robust SGD on the warm-up splits for ``k0`` synchronous rounds.

    Normal nodes, and Byzantine nodes under a data-level attack, follow ``rule``
    with gradients from their own warm-up data.  Under a message-level attack the
    Byzantine nodes mix plainly and step along the attacked gradient.
    """
    if k0 < 0:
        raise ValueError("k0 must be non-negative")
    m = w.shape[0]
    d = datasets[0].x.shape[1]
    eta = default_warmup_eta(k0) if eta is None else eta
    thetas = np.zeros((m, d)) if theta0 is None else np.array(theta0, dtype=float, copy=True)
    byz = np.array([ds.is_byzantine for ds in datasets])
    normal = np.nonzero(~byz)[0]
    trace = [consensus_error(thetas, normal)]
    if k0 == 0:
        return WarmupResult(thetas, np.asarray(trace), eta)

    for ds in datasets:
        if ds.warmup_indices is None or ds.warmup_indices.size == 0:
            raise ValueError(f"node {ds.node_id} has no warm-up samples")
    x, y = stack_datasets(datasets)
    # all mini-batch positions for the phase, drawn per node up front
    batches = np.stack(
        [
            ds.warmup_indices[stream(seed, Phase.WARMUP, ds.node_id).integers(ds.warmup_indices.size, size=(k0, batch_size))]
            for ds in datasets
        ],
        axis=1,
    )  # (k0, m, B)
    neighbors = [np.nonzero((w[i] > 0) & (np.arange(m) != i))[0] for i in range(m)]
    node_rules = []
    for i in range(m):
        r = rule
        if isinstance(rule, (IosRemove, UbarSelect)):
            # a node with a single neighbor has nothing to discard
            r = replace(rule, b=min(rule.b, neighbors[i].size - 1)) if neighbors[i].size > 1 else Average()
        node_rules.append(r)
    message_attack = attack is not None and attack.level == "message" and byz.any()
    attack_rng = stream(seed, Phase.ATTACK, 0)

    for k in range(k0):
        idx = batches[k]
        grads = stacked_gradients(thetas, x, y, idx)
        if message_attack:
            grads = apply_message_attack(attack, grads, np.nonzero(byz)[0], attack_rng)
        agg = np.empty_like(thetas)
        for i in range(m):
            nb = neighbors[i]
            if nb.size == 0:
                agg[i] = thetas[i]
                continue
            weights = np.concatenate(([w[i, i]], w[i, nb]))
            if message_attack and byz[i]:
                agg[i] = _weighted(np.vstack([thetas[i], thetas[nb]]), weights, np.ones(nb.size + 1, bool))
                continue
            losses = None
            if isinstance(node_rules[i], UbarSelect):
                cand = np.vstack([thetas[i], thetas[nb]])
                resid = x[i, idx[i]] @ cand.T - y[i, idx[i]][:, None]
                losses = 0.5 * np.mean(resid**2, axis=0)
            agg[i] = warmup_aggregate(node_rules[i], thetas[i], thetas[nb], weights, losses, progress=k / k0)
        thetas = agg - eta * grads
        trace.append(consensus_error(thetas, normal))
    return WarmupResult(thetas, np.asarray(trace), eta)
