"""Rescaled decentralized SGD over a pruned, row-stochastic network.

Each node keeps ``y_i`` (a row of ``W^(t0 + k)``) whose own entry tracks the
Perron weight ``[v1]_i``; dividing the local gradient by it undoes the bias a
non-doubly-stochastic mixing matrix puts on the network average.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .problem import GlobalObjective, NodeDataset, stack_datasets, stacked_gradients
from .rng import Phase, stream
from .topology import SpectralProfile, check_row_stochastic, spectral_profile

DIVISOR_FLOOR = 1e-12
BLOWUP_FACTOR = 1e8  # gap growth over the start that counts as divergence
T0_RANGE = (1, 50)
METRIC_COLUMNS = ["k", "eta", "gap", "grad_norm_bar", "grad_norm_tilde", "consensus_Mk", "tracking_residual"]


@dataclass
class OptimizerState:
    theta: np.ndarray  # (m, d)
    y: np.ndarray  # (m, m); row i is y_i
    k: int = 0
    eta: float = 0.0


@dataclass
class RunMetrics:
    rows: list[dict] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def final(self) -> dict:
        return self.rows[-1]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRIC_COLUMNS)
            for r in self.rows:
                writer.writerow([r["k"]] + [f"{r[c]:.17g}" for c in METRIC_COLUMNS[1:]])

    @classmethod
    def from_csv(cls, path: str | Path) -> RunMetrics:
        with open(path, newline="") as fh:
            rows = [
                {c: (int(r[c]) if c == "k" else float(r[c])) for c in METRIC_COLUMNS}
                for r in csv.DictReader(fh)
            ]
        return cls(rows)


def init_y(a: np.ndarray, t0: int) -> np.ndarray:
    if t0 < 0:
        raise ValueError("t0 must be non-negative")
    return np.linalg.matrix_power(a, t0)


def default_t0(profile: SpectralProfile) -> int:
    """Smallest power satisfying the warm-start rule for ``Y_0 = A^t0``, clamped."""
    m_g = profile.v1.size
    if m_g == 1 or profile.c_const <= 0:
        return T0_RANGE[0]
    denom = 48.0 * profile.c_const**2 * profile.w_const**4 * float(profile.v1 @ profile.v1)
    t0 = math.ceil(math.log(m_g / denom) / (2.0 * math.log(profile.rho)))
    return int(min(max(t0, T0_RANGE[0]), T0_RANGE[1]))


def step(
    state: OptimizerState,
    mixing: np.ndarray,
    gradients: np.ndarray,
    eta: float,
    active: np.ndarray | Sequence[int] | None = None,
) -> OptimizerState:
    """One synchronous round.

    ``y <- W y``; ``theta_i <- sum_j W_ij theta_j - eta g_i / [y_i]_i`` using the
    freshly mixed ``y``.  Nodes outside ``active`` only mix.
    """
    y_new = mixing @ state.y
    theta_new = mixing @ state.theta
    act = np.arange(mixing.shape[0]) if active is None else np.asarray(active, dtype=int)
    div = y_new[act, act]
    if np.any(div < DIVISOR_FLOOR):
        bad = act[div < DIVISOR_FLOOR]
        raise FloatingPointError(
            f"eigenvector-tracking divisor below {DIVISOR_FLOOR:g} at nodes {bad.tolist()} "
            f"(iteration {state.k + 1}); the active set is not an irreducible closed component"
        )
    theta_new[act] -= eta * gradients[act] / div[:, None]
    return OptimizerState(theta_new, y_new, state.k + 1, eta)


def compute_metrics(
    state: OptimizerState,
    v1: np.ndarray,
    scc: np.ndarray | Sequence[int],
    objective: GlobalObjective,
) -> dict:
    idx = np.asarray(scc, dtype=int)
    thetas = state.theta[idx]
    theta_tilde = v1 @ thetas
    theta_bar = thetas.mean(axis=0)
    block = state.y[np.ix_(idx, idx)]
    return {
        "k": state.k,
        "eta": state.eta,
        "gap": float(objective.gap(theta_tilde)),
        "grad_norm_bar": float(np.linalg.norm(objective.gradient(theta_bar))),
        "grad_norm_tilde": float(np.linalg.norm(objective.gradient(theta_tilde))),
        "consensus_Mk": float(np.mean(np.sum((thetas - theta_tilde) ** 2, axis=1))),
        "tracking_residual": float(np.linalg.norm(block - np.outer(np.ones(idx.size), v1), 2)),
    }


@dataclass
class OptimizationResult:
    metrics: RunMetrics
    state: OptimizerState
    profile: SpectralProfile
    t0: int
    scc: np.ndarray


def run_optimization(
    w: np.ndarray,
    scc: Sequence[int],
    datasets: Sequence[NodeDataset],
    iterations: int,
    batch_size: int = 10,
    seed: int = 0,
    theta0: np.ndarray | None = None,
    t0: int | None = None,
    eta: float | None = None,
    objective: GlobalObjective | None = None,
) -> OptimizationResult:
    """DRSGD for ``iterations`` rounds on the whole pruned graph.

    Only the closed component ``scc`` takes rescaled gradient steps; metrics are
    computed over it.  Mini-batches are drawn with replacement from each node's
    full local dataset.
    """
    check_row_stochastic(w)
    if iterations < 0:
        raise ValueError("iteration count must be non-negative")
    scc_idx = np.asarray(sorted(int(i) for i in scc), dtype=int)
    if scc_idx.size == 0:
        raise ValueError("no closed strongly connected component; review the detection phase")
    outside = np.setdiff1d(np.arange(w.shape[0]), scc_idx)
    if np.any(w[np.ix_(scc_idx, outside)] > 0):
        raise ValueError("component has in-arcs from outside; it is not closed")
    profile = spectral_profile(w[np.ix_(scc_idx, scc_idx)])
    t0 = default_t0(profile) if t0 is None else int(t0)
    m_g = scc_idx.size
    if eta is None:
        eta = 1.0 / math.sqrt(m_g * max(iterations, 1))
    objective = objective or GlobalObjective.from_datasets(datasets)

    m = w.shape[0]
    d = datasets[0].x.shape[1]
    theta = np.zeros((m, d)) if theta0 is None else np.array(theta0, dtype=float, copy=True)
    state = OptimizerState(theta, init_y(w, t0), 0, eta)
    metrics = RunMetrics([compute_metrics(state, profile.v1, scc_idx, objective)])
    blowup = BLOWUP_FACTOR * max(metrics.rows[0]["gap"], 1.0)
    if iterations == 0:
        return OptimizationResult(metrics, state, profile, t0, scc_idx)

    x, y = stack_datasets(datasets)
    batches = np.stack(
        [stream(seed, Phase.OPTIMIZATION, ds.node_id).integers(ds.size, size=(iterations, batch_size)) for ds in datasets],
        axis=1,
    )
    for k in range(iterations):
        with np.errstate(over="ignore", invalid="ignore"):
            grads = stacked_gradients(state.theta, x, y, batches[k])
            state = step(state, w, grads, eta, active=scc_idx)
            row = compute_metrics(state, profile.v1, scc_idx, objective)
        if not all(math.isfinite(v) for v in row.values()) or row["gap"] > blowup:
            worst = int(scc_idx[np.argmin(profile.v1)])
            raise FloatingPointError(
                f"iterates diverged at iteration {state.k}: node {worst} has Perron weight "
                f"{profile.v1.min():.3g}, so its effective step is {eta / profile.v1.min():.3g}"
            )
        metrics.rows.append(row)
    return OptimizationResult(metrics, state, profile, t0, scc_idx)
