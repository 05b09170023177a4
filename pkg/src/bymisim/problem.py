"""Synthetic decentralized linear regression under Huber contamination.

Each node holds ``N`` samples ``(x, y)`` with squared loss
``l(theta; x, y) = (y - x^T theta)^2 / 2``.  Normal nodes draw
``x ~ N(0, I_d)``, ``y = x^T theta_star + noise``; Byzantine nodes draw from a
contaminated distribution or tamper with the messages they send.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import ClassVar, Union

import numpy as np

from .rng import Phase, stream


@dataclass(frozen=True)
class LinearTask:
    d: int
    noise_std: float = 1.0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"dimension must be positive, got {self.d}")

    @property
    def sparsity(self) -> int:
        return int(math.floor(0.1 * self.d))

    @property
    def theta_star(self) -> np.ndarray:
        theta = np.zeros(self.d)
        theta[: self.sparsity] = 1.0
        return theta


# ---------------------------------------------------------------- attacks


@dataclass(frozen=True)
class ParamAttack:
    """Byzantine responses come from ``theta_c = (mu_c 1_s, 0, ...)`` with ``s = floor(s_r d)``."""

    mu_c: float = 5.0
    s_r: float = 0.1
    level: ClassVar[str] = "data"
    kind: ClassVar[str] = "param"

    def theta_c(self, d: int) -> np.ndarray:
        theta = np.zeros(d)
        theta[: int(math.floor(self.s_r * d))] = self.mu_c
        return theta


@dataclass(frozen=True)
class DataAttack:
    """Covariates become ``scale * x + shift * v_d`` and responses gain ``bias``."""

    scale: float = 0.8
    shift: float = 3.0
    bias: float = 1.0
    level: ClassVar[str] = "data"
    kind: ClassVar[str] = "data"


@dataclass(frozen=True)
class GradAttack:
    """Byzantine gradient ``mean_scale * g_clean + eps``.

    ``eps ~ N(nu, std^2 I)`` with ``nu ~ N(0, (offset_scale * std)^2 I)`` and
    ``std`` the coordinatewise spread of the normal gradients in that round.
    """

    mean_scale: float = 0.5
    offset_scale: float = 20.0
    level: ClassVar[str] = "message"
    kind: ClassVar[str] = "grad"


@dataclass(frozen=True)
class IpmAttack:
    """Inner-product manipulation: Byzantine gradient is ``-a * g_clean``."""

    a: float = 1.0
    level: ClassVar[str] = "message"
    kind: ClassVar[str] = "ipm"


AttackSpec = Union[ParamAttack, DataAttack, GradAttack, IpmAttack]
ATTACKS = {cls.kind: cls for cls in (ParamAttack, DataAttack, GradAttack, IpmAttack)}


# ---------------------------------------------------------------- datasets


@dataclass(frozen=True)
class NodeDataset:
    node_id: int
    x: np.ndarray
    y: np.ndarray
    is_byzantine: bool = False
    warmup_indices: np.ndarray | None = None
    identification_indices: np.ndarray | None = None

    @property
    def size(self) -> int:
        return int(self.y.shape[0])

    @property
    def is_split(self) -> bool:
        return self.identification_indices is not None


@dataclass(frozen=True)
class GradientBatch:
    vector: np.ndarray
    batch_size: int

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def shared_direction(d: int, seed: int) -> np.ndarray:
    """``v_d``: d i.i.d. U(0,1) entries, L2-normalized, one draw per run."""
    v = stream(seed, Phase.SHARED).uniform(0.0, 1.0, size=d)
    return v / np.linalg.norm(v)


def generate_network_data(
    task: LinearTask,
    m: int,
    n_samples: int,
    byz_ids: Iterable[int],
    attack: AttackSpec | None,
    seed: int,
) -> list[NodeDataset]:
    byz = {int(b) for b in byz_ids}
    if any(not 0 <= b < m for b in byz):
        raise ValueError("Byzantine ids outside [0, m)")
    if 2 * len(byz) >= m:
        raise ValueError(f"{len(byz)} Byzantine nodes out of {m} violates ratio < 1/2")
    theta_star = task.theta_star
    v_d = shared_direction(task.d, seed) if isinstance(attack, DataAttack) else None
    out = []
    for i in range(m):
        rng = stream(seed, Phase.DATA, i)
        x = rng.standard_normal((n_samples, task.d))
        noise = task.noise_std * rng.standard_normal(n_samples)
        if i in byz and isinstance(attack, ParamAttack):
            y = x @ attack.theta_c(task.d) + noise
        elif i in byz and isinstance(attack, DataAttack):
            x = attack.scale * x + attack.shift * v_d
            y = x @ theta_star + noise + attack.bias
        else:
            y = x @ theta_star + noise
        out.append(NodeDataset(i, x, y, is_byzantine=i in byz))
    return out


def split_dataset(data: NodeDataset, n: int, seed: int) -> NodeDataset:
    """Random warm-up / identification split; the identification part has ``n`` samples."""
    if n % 2:
        raise ValueError(f"identification size must be even, got {n}")
    if not 0 < n < data.size:
        raise ValueError(f"identification size {n} must lie in (0, {data.size})")
    perm = stream(seed, Phase.SPLIT, data.node_id).permutation(data.size)
    return replace(data, identification_indices=np.sort(perm[:n]), warmup_indices=np.sort(perm[n:]))


def identification_halves(data: NodeDataset, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two disjoint equal-size sub-batches exhausting the identification set."""
    if not data.is_split:
        raise ValueError(f"node {data.node_id} has no identification split")
    ident = stream(seed, Phase.DETECTION, data.node_id).permutation(data.identification_indices)
    half = ident.size // 2
    return ident[:half], ident[half:]


# ---------------------------------------------------------------- losses


def batch_loss(theta: np.ndarray, data: NodeDataset, indices: Sequence[int] | np.ndarray) -> float:
    idx = np.asarray(indices, dtype=int)
    r = data.x[idx] @ theta - data.y[idx]
    return 0.5 * float(np.mean(r * r))


def minibatch_gradient(theta: np.ndarray, data: NodeDataset, indices) -> GradientBatch:
    idx = np.asarray(indices, dtype=int)
    if idx.size == 0:
        raise ValueError("empty mini-batch")
    x = data.x[idx]
    return GradientBatch(x.T @ (x @ theta - data.y[idx]) / idx.size, int(idx.size))


def stacked_gradients(thetas: np.ndarray, x: np.ndarray, y: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Per-node mini-batch gradients in one shot.

    ``thetas (m, d)``, ``x (m, N, d)``, ``y (m, N)``, ``idx (m, B)`` -> ``(m, d)``.
    """
    rows = np.arange(x.shape[0])[:, None]
    xb = x[rows, idx]
    resid = np.einsum("mbd,md->mb", xb, thetas) - y[rows, idx]
    return np.einsum("mbd,mb->md", xb, resid) / idx.shape[1]


def stack_datasets(datasets: Sequence[NodeDataset]) -> tuple[np.ndarray, np.ndarray]:
    sizes = {ds.size for ds in datasets}
    if len(sizes) != 1:
        raise ValueError("stacking needs equal local dataset sizes")
    return np.stack([ds.x for ds in datasets]), np.stack([ds.y for ds in datasets])


@dataclass
class GlobalObjective:
    """``f(theta) = mean_i f_i(theta)`` over the normal nodes, as a quadratic.

    ``f(theta) = theta^T H theta / 2 - b^T theta + c / 2``; the reference point
    ``theta_hat`` is the exact pooled minimizer.
    """

    hessian: np.ndarray
    linear: np.ndarray
    const: float
    theta_hat: np.ndarray = field(init=False)
    max_condition: float = 1e12

    def __post_init__(self):
        cond = np.linalg.cond(self.hessian)
        if not np.isfinite(cond) or cond > self.max_condition:
            raise np.linalg.LinAlgError(f"pooled design is singular (condition number {cond:.3e})")
        self.theta_hat = np.linalg.solve(self.hessian, self.linear)

    @classmethod
    def from_datasets(cls, datasets: Sequence[NodeDataset]) -> GlobalObjective:
        normal = [ds for ds in datasets if not ds.is_byzantine]
        if not normal:
            raise ValueError("need at least one normal node")
        h = sum(ds.x.T @ ds.x / ds.size for ds in normal) / len(normal)
        b = sum(ds.x.T @ ds.y / ds.size for ds in normal) / len(normal)
        c = sum(float(ds.y @ ds.y) / ds.size for ds in normal) / len(normal)
        return cls(h, b, c)

    def value(self, theta: np.ndarray) -> np.ndarray | float:
        theta = np.asarray(theta, dtype=float)
        quad = np.einsum("...i,ij,...j->...", theta, self.hessian, theta)
        return 0.5 * quad - theta @ self.linear + 0.5 * self.const

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        return np.asarray(theta) @ self.hessian - self.linear

    def gap(self, theta: np.ndarray) -> np.ndarray | float:
        """``f(theta) - f(theta_hat)``, evaluated in the stable quadratic form."""
        delta = np.asarray(theta, dtype=float) - self.theta_hat
        return 0.5 * np.einsum("...i,ij,...j->...", delta, self.hessian, delta)


def global_objective(theta: np.ndarray, datasets: Sequence[NodeDataset]) -> np.ndarray | float:
    return GlobalObjective.from_datasets(datasets).value(theta)


def optimality_gap(theta: np.ndarray, datasets: Sequence[NodeDataset]) -> np.ndarray | float:
    return GlobalObjective.from_datasets(datasets).gap(theta)


def local_gradient(theta: np.ndarray, data: NodeDataset) -> np.ndarray:
    """Full local gradient of ``f_i``."""
    return minibatch_gradient(theta, data, np.arange(data.size)).vector


# ---------------------------------------------------------------- message attacks


def apply_message_attack(
    attack: AttackSpec,
    clean: np.ndarray,
    byz_ids: Iterable[int],
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Overwrite the Byzantine rows of ``clean (m, d)``.

    The clean average and spread are taken over the normal rows only.
    """
    if attack.level != "message":
        raise ValueError(f"{attack.kind!r} is a data-level attack")
    byz = sorted({int(b) for b in byz_ids})
    out = np.array(clean, dtype=float, copy=True)
    if not byz:
        return out
    normal = np.setdiff1d(np.arange(clean.shape[0]), byz)
    if normal.size == 0:
        raise ValueError("message attacks need at least one normal node")
    g_bar = clean[normal].mean(axis=0)
    if isinstance(attack, IpmAttack):
        out[byz] = -attack.a * g_bar
        return out
    if rng is None:
        raise ValueError("gradient attack needs a random generator")
    std = clean[normal].std(axis=0)
    for b in byz:
        nu = rng.normal(0.0, attack.offset_scale * std)
        out[b] = attack.mean_scale * g_bar + rng.normal(nu, std)
    return out


# ---------------------------------------------------------------- CSV dumps


def save_datasets_csv(directory: str | Path, datasets: Sequence[NodeDataset]) -> None:
    """One file per node: ``node_<id>.csv`` with columns ``x0..x{d-1}, y, role``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for ds in datasets:
        role = np.full(ds.size, "", dtype=object)
        if ds.is_split:
            role[ds.warmup_indices] = "warmup"
            role[ds.identification_indices] = "identification"
        with open(directory / f"node_{ds.node_id}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            d = ds.x.shape[1]
            writer.writerow([f"x{k}" for k in range(d)] + ["y", "role", "byzantine"])
            for row, yv, r in zip(ds.x, ds.y, role):
                writer.writerow([f"{v:.17g}" for v in row] + [f"{yv:.17g}", r, int(ds.is_byzantine)])


def load_datasets_csv(directory: str | Path) -> list[NodeDataset]:
    directory = Path(directory)
    files = sorted(directory.glob("node_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
    out = []
    for path in files:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        d = len(header) - 3
        x = np.array([[float(v) for v in r[:d]] for r in body]).reshape(len(body), d)
        y = np.array([float(r[d]) for r in body])
        roles = np.array([r[d + 1] for r in body])
        byz = bool(int(body[0][d + 2])) if body else False
        ds = NodeDataset(int(path.stem.split("_")[1]), x, y, is_byzantine=byz)
        if np.any(roles != ""):
            ds = replace(
                ds,
                warmup_indices=np.nonzero(roles == "warmup")[0],
                identification_indices=np.nonzero(roles == "identification")[0],
            )
        out.append(ds)
    return out
