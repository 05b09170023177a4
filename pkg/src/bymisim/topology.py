"""Network topologies, mixing matrices, pruning and spectral quantities.

Mixing matrices are dense ``(m, m)`` float arrays.  Row ``i`` holds the weights
node ``i`` applies to what it receives, so a positive off-diagonal ``W[i, j]``
means there is an arc ``j -> i``.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Phase, stream

log = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class UndirectedGraph:
    m: int
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"node count must be positive, got {self.m}")
        normalized = set()
        for u, v in self.edges:
            u, v = int(u), int(v)
            if u == v:
                raise ValueError(f"self-edge at node {u}")
            if not (0 <= u < self.m and 0 <= v < self.m):
                raise ValueError(f"edge ({u}, {v}) outside [0, {self.m})")
            normalized.add((min(u, v), max(u, v)))
        object.__setattr__(self, "edges", frozenset(normalized))

    def neighbors(self, i: int) -> list[int]:
        return sorted({v for u, v in self.edges if u == i} | {u for u, v in self.edges if v == i})

    def adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.m)]
        for u, v in sorted(self.edges):
            adj[u].append(v)
            adj[v].append(u)
        return adj

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.m, dtype=int)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def is_connected(self, nodes: Iterable[int] | None = None) -> bool:
        """Connectivity of the subgraph induced by ``nodes`` (default: all)."""
        keep = set(range(self.m)) if nodes is None else set(nodes)
        if not keep:
            return False
        adj = self.adjacency()
        start = min(keep)
        seen = {start}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v in keep and v not in seen:
                    seen.add(v)
                    queue.append(v)
        return seen == keep

    def to_directed(self) -> DirectedGraph:
        arcs = set()
        for u, v in self.edges:
            arcs.add((u, v))
            arcs.add((v, u))
        return DirectedGraph(self.m, frozenset(arcs))


@dataclass(frozen=True)
class DirectedGraph:
    """Arcs are ``(u, v)`` pairs meaning ``u -> v`` (``v`` receives from ``u``)."""

    m: int
    arcs: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        for u, v in self.arcs:
            if not (0 <= u < self.m and 0 <= v < self.m):
                raise ValueError(f"arc ({u}, {v}) outside [0, {self.m})")
            if u == v:
                raise ValueError(f"self-arc at node {u}")

    def out_adjacency(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.m)]
        for u, v in sorted(self.arcs):
            adj[u].append(v)
        return adj

    def in_neighbors(self, v: int) -> set[int]:
        return {a for a, b in self.arcs if b == v}

    @classmethod
    def from_mixing(cls, w: np.ndarray) -> DirectedGraph:
        rows, cols = np.nonzero(w > 0)
        return cls(w.shape[0], frozenset((int(j), int(i)) for i, j in zip(rows, cols) if i != j))


@dataclass(frozen=True)
class SpectralProfile:
    """Perron data of an irreducible row-stochastic block.

    ``rho`` and ``c_const`` describe the observed decay
    ``||A^k - 1 v1^T||_2 <= c_const * rho**k``; ``w_const`` is
    ``sup_k max_i 1 / [A^k]_ii``.  ``lambda2`` is reported only.
    """

    v1: np.ndarray
    rho: float
    c_const: float
    lambda2: float
    w_const: float
    residual: float


# ---------------------------------------------------------------- generation


def gen_erdos_renyi(m: int, p: float, seed: int, attempt: int = 0) -> UndirectedGraph:
    """G(m, p): every unordered pair is an edge independently with probability p.

    ``attempt`` selects a fresh draw for the same seed (used when resampling).
    """
    if m < 2:
        raise ValueError(f"need m >= 2, got {m}")
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise ValueError(f"edge probability must lie in [0, 1], got {p}")
    rng = stream(seed, Phase.TOPOLOGY, attempt)
    iu, ju = np.triu_indices(m, k=1)
    keep = rng.random(iu.size) < p
    return UndirectedGraph(m, frozenset(zip(iu[keep].tolist(), ju[keep].tolist())))


def satisfies_connectivity_condition(g: UndirectedGraph, byzantine: Iterable[int]) -> bool:
    """Whole graph connected and the normal-node subgraph connected."""
    byz = set(byzantine)
    normal = [i for i in range(g.m) if i not in byz]
    return g.is_connected() and bool(normal) and g.is_connected(normal)


# ---------------------------------------------------------------- mixing


def metropolis_weights(g: UndirectedGraph) -> np.ndarray:
    deg = g.degrees()
    w = np.zeros((g.m, g.m))
    for u, v in g.edges:
        w[u, v] = w[v, u] = 1.0 / (1.0 + max(deg[u], deg[v]))
    np.fill_diagonal(w, 1.0 - w.sum(axis=1))
    return w


def check_row_stochastic(w: np.ndarray, tol: float = ROW_SUM_TOL) -> None:
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError(f"mixing matrix must be square, got shape {w.shape}")
    if np.any(w < 0):
        raise ValueError("mixing matrix has negative entries")
    err = np.max(np.abs(w.sum(axis=1) - 1.0))
    if err > tol:
        raise ValueError(f"rows do not sum to one (max deviation {err:.3e})")


def prune_and_reweight(
    w_old: np.ndarray, removals: Mapping[int, Iterable[int]] | Sequence[Iterable[int]]
) -> tuple[DirectedGraph, np.ndarray]:
    """Cut the listed in-arcs and renormalize every row over what survives.

    ``removals[i]`` is the set of in-neighbors node ``i`` stops listening to.
    """
    m = w_old.shape[0]
    items = removals.items() if isinstance(removals, Mapping) else enumerate(removals)
    w = np.array(w_old, dtype=float, copy=True)
    for i, cut in items:
        cut = {int(j) for j in cut}
        if not cut:
            continue
        if i in cut:
            raise ValueError(f"node {i} cannot remove its own self-loop")
        bad = [j for j in cut if not (0 <= j < m) or w_old[i, j] <= 0]
        if bad:
            raise ValueError(f"node {i}: {sorted(bad)} are not in-neighbors")
        w[i, sorted(cut)] = 0.0
        total = w[i].sum()
        if total <= 0:
            raise ValueError(f"node {i} would be left with no incoming weight")
        w[i] /= total
    return DirectedGraph.from_mixing(w), w


# ---------------------------------------------------------------- components


def strongly_connected_components(g: DirectedGraph) -> list[frozenset]:
    """Tarjan's algorithm, iterative.  Components sorted by smallest member."""
    adj = g.out_adjacency()
    index: dict[int, int] = {}
    low: dict[int, int] = {}
    on_stack: set[int] = set()
    stack: list[int] = []
    comps: list[frozenset] = []
    counter = 0

    for root in range(g.m):
        if root in index:
            continue
        work = [(root, 0)]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, pos = work[-1]
            if pos < len(adj[v]):
                work[-1] = (v, pos + 1)
                w = adj[v][pos]
                if w not in index:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, 0))
                elif w in on_stack:
                    low[v] = min(low[v], index[w])
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
            if low[v] == index[v]:
                comp = set()
                while True:
                    u = stack.pop()
                    on_stack.discard(u)
                    comp.add(u)
                    if u == v:
                        break
                comps.append(frozenset(comp))
    return sorted(comps, key=min)


def has_external_in_arcs(g: DirectedGraph, nodes: Iterable[int]) -> bool:
    inside = set(nodes)
    return any(u not in inside and v in inside for u, v in g.arcs)


def largest_closed_scc(g: DirectedGraph) -> frozenset | None:
    """Largest SCC with no in-arcs from outside, or None.

    Among equally large components a closed one wins, then the one holding the
    smallest node index.  If every largest component has an external in-arc the
    answer is None.
    """
    comps = strongly_connected_components(g)
    if not comps:
        return None
    biggest = max(len(c) for c in comps)
    for comp in comps:  # already ordered by smallest member
        if len(comp) == biggest and not has_external_in_arcs(g, comp):
            return comp
    return None


# ---------------------------------------------------------------- spectra


def perron_residuals(a: np.ndarray, v1: np.ndarray, kmax: int, floor: float = 0.0) -> np.ndarray:
    """``||A^k - 1 v1^T||_2`` for ``k = 0..kmax`` (stops early once below ``floor``)."""
    limit = np.outer(np.ones(a.shape[0]), v1)
    power = np.eye(a.shape[0])
    out = []
    for _ in range(kmax + 1):
        out.append(np.linalg.norm(power - limit, 2))
        if out[-1] < floor:
            break
        power = power @ a
    return np.asarray(out)


def _left_perron(a: np.ndarray, tol: float, max_iter: int) -> tuple[np.ndarray, float]:
    m = a.shape[0]
    v = np.full(m, 1.0 / m)
    best = np.inf
    for it in range(max_iter):
        nxt = v @ a
        nxt /= nxt.sum()
        res = np.max(np.abs(nxt @ a - nxt))
        v = nxt
        # keep iterating past tol while the residual still improves
        if res <= tol and res >= best:
            break
        best = min(best, res)
    # one direct solve of v (A - I) = 0, sum(v) = 1 pushes the residual to rounding level
    m_ones = np.vstack([a.T - np.eye(m), np.ones((1, m))])
    rhs = np.zeros(m + 1)
    rhs[-1] = 1.0
    polished = np.linalg.lstsq(m_ones, rhs, rcond=None)[0]
    if np.all(polished > 0) and np.max(np.abs(polished @ a - polished)) < np.max(np.abs(v @ a - v)):
        v = polished / polished.sum()
    res = float(np.max(np.abs(v @ a - v)))
    if res > tol:
        log.warning("power iteration stalled at residual %.2e; solving directly", res)
        vals, vecs = np.linalg.eig(a.T)
        k = int(np.argmin(np.abs(vals - 1.0)))
        v = np.abs(np.real(vecs[:, k]))
        v /= v.sum()
        res = float(np.max(np.abs(v @ a - v)))
    return v, res


def spectral_profile(a: np.ndarray, tol: float = 1e-10) -> SpectralProfile:
    """Perron vector and geometric decay constants of an irreducible block."""
    check_row_stochastic(a, tol=1e-10)
    m = a.shape[0]
    if len(strongly_connected_components(DirectedGraph.from_mixing(a))) != 1:
        raise ValueError("matrix is reducible; restrict it to a closed SCC first")
    v1, res = _left_perron(a, tol, max_iter=100 * m)
    if np.any(v1 <= 0):
        raise ValueError("Perron vector has non-positive entries")

    if m == 1:
        return SpectralProfile(v1, rho=1e-12, c_const=0.0, lambda2=0.0, w_const=1.0, residual=res)

    eig = np.sort(np.abs(np.linalg.eigvals(a)))[::-1]
    lambda2 = float(eig[1])

    errs = perron_residuals(a, v1, kmax=100 * m, floor=1e-13)
    usable = np.nonzero(errs > 1e-13)[0]
    last = int(usable[-1]) if usable.size else 0
    span = min(10, last - 1)
    if span >= 1:
        rho = (errs[last] / errs[last - span]) ** (1.0 / span)
    else:
        rho = lambda2
    rho = float(np.clip(rho, 1e-12, 1.0 - 1e-12))
    ks = np.arange(errs.size)
    c_const = float(np.max(errs[: last + 1] / rho ** ks[: last + 1]))

    # w = sup_k max_i 1/[A^k]_ii over the powers seen, plus the limit 1/min(v1)
    w_const = 1.0 / float(np.min(v1))
    power = np.eye(m)
    for _ in range(last + 1):
        w_const = max(w_const, 1.0 / float(np.min(np.diag(power))))
        power = power @ a
    return SpectralProfile(v1, rho, c_const, lambda2, w_const, res)


def connectivity_constant(m: float, p: float, beta0: float = 0.0, delta: float = 0.0) -> float:
    """``m p (1 - beta0 - delta) - log m``; governs connectivity of the pruned normal graph."""
    if beta0 + delta >= 1:
        raise ValueError("beta0 + delta must be below 1")
    return m * p * (1.0 - beta0 - delta) - math.log(m)


def isolation_constant(m: float, p: float) -> float:
    """``m p - log m``, the exponent in the expected number of isolated nodes of G(m, p)."""
    return connectivity_constant(m, p)


# ---------------------------------------------------------------- CSV dumps


def save_matrix_csv(path: str | Path, mat: np.ndarray) -> None:
    np.savetxt(path, np.atleast_2d(mat), delimiter=",", fmt="%.17g")


def load_matrix_csv(path: str | Path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=float))


def save_graph_csv(path: str | Path, g: UndirectedGraph | DirectedGraph) -> None:
    pairs = sorted(g.edges if isinstance(g, UndirectedGraph) else g.arcs)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["m", g.m])
        writer.writerows(pairs)


def load_graph_csv(path: str | Path, directed: bool = False) -> UndirectedGraph | DirectedGraph:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    m = int(rows[0][1])
    pairs = frozenset((int(u), int(v)) for u, v in rows[1:])
    return DirectedGraph(m, pairs) if directed else UndirectedGraph(m, pairs)
