"""Byzantine machine identification by sample splitting.

Every node sends two gradients computed on disjoint halves of its
identification set.  Node ``i`` scores neighbor ``j`` with
``S_ij = (g1_j - g_hat)^T Omega (g2_j - g_hat)``, which is roughly symmetric
around zero for normal neighbors and large and positive for Byzantine ones.
The cut-off is the smallest ``r`` where the negative tail count over the
positive tail count drops to ``alpha``.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .problem import AttackSpec, NodeDataset, apply_message_attack, identification_halves, minibatch_gradient
from .rng import Phase, stream
from .robust import RobustMeanEstimator, robust_mean
from .topology import UndirectedGraph

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Identity:
    kind = "identity"


@dataclass(frozen=True)
class PcaProjection:
    variance_fraction: float = 0.95
    kind = "pca"

    def __post_init__(self):
        if not 0.0 < self.variance_fraction <= 1.0:
            raise ValueError("variance_fraction must lie in (0, 1]")


OmegaSpec = Union[Identity, PcaProjection]
OMEGAS = {cls.kind: cls for cls in (Identity, PcaProjection)}


@dataclass
class NodeDetection:
    node: int
    neighbors: np.ndarray
    scores: np.ndarray
    threshold: float
    detected: frozenset
    byzantine_neighbors: frozenset

    @property
    def fdp(self) -> float:
        return false_discovery_proportion(self.detected, self.byzantine_neighbors)

    @property
    def pa(self) -> int:
        return int(self.byzantine_neighbors <= self.detected)


@dataclass
class DetectionReport:
    nodes: dict[int, NodeDetection] = field(default_factory=dict)
    byzantine: frozenset = frozenset()

    @property
    def avg_fdp(self) -> float:
        if not self.nodes:
            return 0.0
        return float(np.mean([nd.fdp for nd in self.nodes.values()]))

    @property
    def avg_pa(self) -> float:
        if not self.nodes:
            return 1.0
        return float(np.mean([nd.pa for nd in self.nodes.values()]))

    def removals(self) -> dict[int, frozenset]:
        return {i: nd.detected for i, nd in self.nodes.items()}


def false_discovery_proportion(detected: Iterable[int], byzantine: Iterable[int]) -> float:
    detected = set(detected)
    return len(detected - set(byzantine)) / max(len(detected), 1)


# ---------------------------------------------------------------- building blocks


def build_omega(spec: OmegaSpec, first_half_grads) -> np.ndarray:
    """Scoring metric: identity, or projector onto the leading principal directions."""
    grads = np.atleast_2d(np.asarray(first_half_grads, dtype=float))
    d = grads.shape[1]
    if isinstance(spec, Identity):
        return np.eye(d)
    if grads.shape[0] < 2:
        raise ValueError("PCA projection needs at least two gradients")
    centered = grads - grads.mean(axis=0)
    _, sing, vt = np.linalg.svd(centered, full_matrices=False)
    var = sing**2
    total = var.sum()
    if total <= 1e-300 or var[0] <= 1e-12 * max(1.0, float(np.abs(grads).max()) ** 2):
        log.warning("neighbor gradients are degenerate; falling back to identity metric")
        return np.eye(d)
    cum = np.cumsum(var) / total
    rank = int(np.searchsorted(cum, spec.variance_fraction * (1 - 1e-10)) + 1)
    rank = min(rank, int(np.sum(var > 1e-12 * var[0])))
    basis = vt[:rank]
    return basis.T @ basis


def score(g1: np.ndarray, g2: np.ndarray, g_hat: np.ndarray, omega: np.ndarray) -> float:
    return float((g1 - g_hat) @ omega @ (g2 - g_hat))


def threshold(scores: Sequence[float], alpha: float) -> tuple[float, np.ndarray]:
    """Data-driven cut-off.  Returns ``(R, indices with S >= R)``; ``R = inf`` if none."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        return math.inf, np.array([], dtype=int)
    mags = np.unique(np.abs(s[s != 0]))
    for r in mags:
        neg = np.count_nonzero(s <= -r)
        pos = np.count_nonzero(s >= r)
        if neg / max(pos, 1) <= alpha:
            hits = np.nonzero(s >= r)[0]
            return (float(r), hits) if hits.size else (math.inf, hits)
    return math.inf, np.array([], dtype=int)


# ---------------------------------------------------------------- the detection round


def detection_gradients(
    thetas: np.ndarray,
    datasets: Sequence[NodeDataset],
    attack: AttackSpec | None = None,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Messages ``(g1, g2)``, each ``(m, d)``, as transmitted in the detection round.

    Under a message-level attack both halves of a Byzantine node carry the same
    attacked vector, built from the normal nodes' clean half-average.
    """
    m = len(datasets)
    g1 = np.empty_like(thetas)
    g2 = np.empty_like(thetas)
    for j, ds in enumerate(datasets):
        h1, h2 = identification_halves(ds, seed)
        g1[j] = minibatch_gradient(thetas[j], ds, h1).vector
        g2[j] = minibatch_gradient(thetas[j], ds, h2).vector
    byz = [ds.node_id for ds in datasets if ds.is_byzantine]
    if attack is not None and attack.level == "message" and byz:
        forged = apply_message_attack(attack, 0.5 * (g1 + g2), byz, stream(seed, Phase.ATTACK, m + 1))
        g1[byz] = forged[byz]
        g2[byz] = forged[byz]
    return g1, g2


def detect_node(
    i: int,
    neighbors: Sequence[int],
    g1: np.ndarray,
    g2: np.ndarray,
    estimator: RobustMeanEstimator,
    omega_spec: OmegaSpec,
    alpha: float,
    byzantine: frozenset = frozenset(),
    include_self: bool = True,
) -> NodeDetection:
    nb = np.asarray(sorted(int(j) for j in neighbors if j != i), dtype=int)
    pool = np.concatenate(([i], nb)) if include_self else nb
    if pool.size == 0:
        return NodeDetection(i, nb, np.array([]), math.inf, frozenset(), frozenset())
    g_hat = robust_mean(estimator, g1[pool])
    omega = build_omega(omega_spec, g1[pool]) if pool.size >= 2 else np.eye(g1.shape[1])
    scores = np.array([score(g1[j], g2[j], g_hat, omega) for j in nb])
    r, hits = threshold(scores, alpha)
    return NodeDetection(
        node=i,
        neighbors=nb,
        scores=scores,
        threshold=r,
        detected=frozenset(int(nb[h]) for h in hits),
        byzantine_neighbors=frozenset(int(j) for j in nb if j in byzantine),
    )


def detect(
    thetas: np.ndarray,
    graph: UndirectedGraph,
    datasets: Sequence[NodeDataset],
    estimator: RobustMeanEstimator,
    omega_spec: OmegaSpec,
    alpha: float,
    attack: AttackSpec | None = None,
    seed: int = 0,
    include_self: bool = True,
) -> DetectionReport:
    """Run identification at every normal node; ground truth comes from the datasets."""
    byz = frozenset(ds.node_id for ds in datasets if ds.is_byzantine)
    g1, g2 = detection_gradients(thetas, datasets, attack, seed)
    adj = graph.adjacency()
    report = DetectionReport(byzantine=byz)
    for i in range(graph.m):
        if i in byz:
            continue
        report.nodes[i] = detect_node(i, adj[i], g1, g2, estimator, omega_spec, alpha, byz, include_self)
    return report


def prune_decisions(report: DetectionReport, graph: UndirectedGraph, byz_policy: str = "none") -> list[set]:
    """In-neighbors each node stops listening to.

    Normal nodes drop what they detected.  Byzantine nodes follow ``byz_policy``:
    ``"none"`` keeps every in-arc, ``"drop-all"`` removes every one.
    """
    if byz_policy not in ("none", "drop-all"):
        raise ValueError(f"unknown Byzantine pruning policy {byz_policy!r}")
    adj = graph.adjacency()
    out: list[set] = [set() for _ in range(graph.m)]
    for i, nd in report.nodes.items():
        out[i] = set(nd.detected)
    if byz_policy == "drop-all":
        for b in report.byzantine:
            out[b] = set(adj[b])
    return out


# ---------------------------------------------------------------- CSV


REPORT_COLUMNS = ["node", "neighbor", "score", "threshold", "detected", "byzantine", "fdp", "pa"]


def write_report_csv(path: str | Path, report: DetectionReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for i in sorted(report.nodes):
            nd = report.nodes[i]
            for j, s in zip(nd.neighbors, nd.scores):
                writer.writerow(
                    [i, int(j), f"{s:.17g}", f"{nd.threshold:.17g}", int(j in nd.detected),
                     int(j in report.byzantine), f"{nd.fdp:.17g}", nd.pa]
                )
        writer.writerow(["ALL", "", "", "", "", "", f"{report.avg_fdp:.17g}", f"{report.avg_pa:.17g}"])


def read_report_csv(path: str | Path) -> tuple[list[dict], dict]:
    """Returns the per-pair rows and the summary row."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows[:-1], rows[-1]
