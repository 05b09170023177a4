"""End-to-end runs: warm-up, detection, pruning, rescaled SGD; sweeps and connectivity studies."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import platform
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bymi import DetectionReport, detect, prune_decisions, write_report_csv
from .config import RunConfig, dumps, to_dict
from .drsgd import OptimizationResult, run_optimization
from .problem import LinearTask, NodeDataset, ParamAttack, generate_network_data, split_dataset
from .rng import Phase, stream
from .robust import WarmupResult, run_warmup
from .topology import (
    DirectedGraph,
    UndirectedGraph,
    connectivity_constant,
    gen_erdos_renyi,
    isolation_constant,
    largest_closed_scc,
    metropolis_weights,
    prune_and_reweight,
    satisfies_connectivity_condition,
    save_graph_csv,
    save_matrix_csv,
)

log = logging.getLogger(__name__)

PHASES = ("topology", "data", "warmup", "detection", "pruning", "optimization", "output")
IMPLEMENTATION_DEFAULTS = {
    "warmup.eta": "0.5/sqrt(k0) when unset",
    "warmup.batch": "implementation choice: mini-batch size 10",
    "optimization.batch": "implementation choice: mini-batch size 10",
    "warmup.rule": "simplified single-loop variant of the named aggregation rule; clipping radius 0.1",
    "balance.kappa": "implementation choice: acceptance radius gamma * exp(-kappa * k / k0) * ||theta_i||",
}


class PhaseError(RuntimeError):
    """A pipeline phase failed; ``partial`` holds whatever the earlier phases produced."""

    def __init__(self, phase: str, message: str, partial: PipelineResult | None = None):
        super().__init__(f"[{phase}] {message}")
        self.phase = phase
        self.partial = partial


@dataclass
class PipelineResult:
    config: RunConfig
    graph: UndirectedGraph
    byzantine: frozenset
    mixing: np.ndarray
    retries: int
    datasets: list[NodeDataset]
    warmup: WarmupResult | None = None
    report: DetectionReport | None = None
    removals: list[set] = field(default_factory=list)
    pruned_graph: DirectedGraph | None = None
    pruned_mixing: np.ndarray | None = None
    scc: frozenset | None = None
    optimization: OptimizationResult | None = None

    @property
    def normal(self) -> frozenset:
        return frozenset(range(self.graph.m)) - self.byzantine

    @property
    def scc_is_normal_set(self) -> bool:
        return self.scc is not None and self.scc == self.normal

    def summary(self) -> dict:
        out = {
            "seed": self.config.seed,
            "retries": self.retries,
            "n_byzantine": len(self.byzantine),
            "fdp": self.report.avg_fdp if self.report else None,
            "pa": self.report.avg_pa if self.report else None,
            "scc_size": len(self.scc) if self.scc is not None else 0,
            "scc_is_normal_set": self.scc_is_normal_set,
        }
        if self.optimization is not None:
            fin = self.optimization.metrics.final
            out.update(
                final_gap=fin["gap"],
                final_grad_norm_bar=fin["grad_norm_bar"],
                final_grad_norm_tilde=fin["grad_norm_tilde"],
                final_consensus=fin["consensus_Mk"],
                t0=self.optimization.t0,
                rho=self.optimization.profile.rho,
            )
        return out


def choose_byzantine(m: int, count: int, seed: int) -> frozenset:
    if count == 0:
        return frozenset()
    return frozenset(int(i) for i in stream(seed, Phase.BYZANTINE).choice(m, size=count, replace=False))


def sample_topology(cfg: RunConfig, byz: frozenset) -> tuple[UndirectedGraph, int]:
    """Erdos-Renyi draw, resampled until the whole graph and the normal subgraph are connected."""
    top = cfg.topology
    for attempt in range(top.max_resamples):
        g = gen_erdos_renyi(top.m, top.p, cfg.seed, attempt)
        if satisfies_connectivity_condition(g, byz):
            return g, attempt
    raise PhaseError("topology", f"no connected draw after {top.max_resamples} attempts")


def run_pipeline(cfg: RunConfig, out_dir: str | Path | None = None, stop_after: str = "optimization") -> PipelineResult:
    """Warm-up -> detection -> prune/reweight -> spectral profile -> DRSGD, in that order."""
    if stop_after not in PHASES:
        raise ValueError(f"unknown phase {stop_after!r}")
    cfg.validate()
    phase = "topology"
    res = None
    target = out_dir if out_dir is not None else cfg.output.dir
    try:
        byz = choose_byzantine(cfg.topology.m, cfg.n_byzantine, cfg.seed)
        graph, retries = sample_topology(cfg, byz)
        w = metropolis_weights(graph)

        phase = "data"
        task = LinearTask(cfg.task.d, cfg.task.noise)
        raw = generate_network_data(task, graph.m, cfg.task.N, byz, cfg.byzantine.attack, cfg.seed)
        datasets = [split_dataset(ds, cfg.n_ident, cfg.seed) for ds in raw]
        res = PipelineResult(cfg, graph, byz, w, retries, datasets)

        phase = "warmup"
        res.warmup = run_warmup(
            w, datasets, cfg.warmup.rule, cfg.warmup.k0, cfg.warmup.eta, cfg.warmup.batch,
            cfg.byzantine.attack, cfg.seed,
        )
        if stop_after == "warmup":
            return res

        phase = "detection"
        det = cfg.detection
        res.report = detect(
            res.warmup.thetas, graph, datasets, det.estimator, det.omega, det.alpha,
            cfg.byzantine.attack, cfg.seed, det.include_self,
        )
        if stop_after == "detection":
            return res

        phase = "pruning"
        res.removals = prune_decisions(res.report, graph, cfg.byzantine.policy)
        res.pruned_graph, res.pruned_mixing = prune_and_reweight(w, res.removals)
        res.scc = largest_closed_scc(res.pruned_graph)
        if stop_after == "pruning":
            return res

        phase = "optimization"
        if res.scc is None:
            raise PhaseError(phase, "pruned graph has no closed largest SCC; review the detection settings")
        res.optimization = run_optimization(
            res.pruned_mixing, sorted(res.scc), datasets, cfg.optimization.K, cfg.optimization.batch,
            cfg.seed, theta0=res.warmup.thetas, t0=cfg.optimization.t0,
        )

        phase = "output"
        if target is not None:
            write_outputs(res, Path(target))
        return res
    except (PhaseError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        if phase != "output" and res is not None and target is not None:
            write_outputs(res, Path(target))
        if isinstance(exc, PhaseError):
            exc.partial = res
            raise
        raise PhaseError(phase, str(exc), res) from exc


def manifest(res: PipelineResult) -> dict:
    return {
        "config": to_dict(res.config),
        "seed": res.config.seed,
        "summary": res.summary(),
        "implementation_defaults": IMPLEMENTATION_DEFAULTS,
        "versions": {
            "bymisim": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }


def write_outputs(res: PipelineResult, out: Path) -> None:
    """Write every artifact the run produced; phases that did not run are skipped."""
    out.mkdir(parents=True, exist_ok=True)
    save_graph_csv(out / "topology.csv", res.graph)
    save_matrix_csv(out / "mixing.csv", res.mixing)
    if res.report is not None:
        write_report_csv(out / "detection.csv", res.report)
    if res.pruned_mixing is not None:
        save_matrix_csv(out / "pruned_mixing.csv", res.pruned_mixing)
        (out / "scc.txt").write_text("".join(f"{i}\n" for i in sorted(res.scc or ())))
    if res.optimization is not None:
        res.optimization.metrics.to_csv(out / "metrics.csv")
    (out / "config.yaml").write_text(dumps(res.config))
    (out / "run.json").write_text(json.dumps(manifest(res), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- sweeps


SWEEP_AXES = ("s_r", "rho", "alpha", "K")
SWEEP_COLUMNS = [
    "axis", "value", "seed", "fdp", "pa", "final_gap", "final_grad_norm_bar",
    "final_grad_norm_tilde", "scc_size", "scc_is_normal_set", "error",
]


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple
    replications: int = 5

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}; choose from {SWEEP_AXES}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")


def with_axis(cfg: RunConfig, axis: str, value, seed: int) -> RunConfig:
    cfg = dataclasses.replace(cfg, seed=seed)
    if axis == "s_r":
        attack = cfg.byzantine.attack
        if not isinstance(attack, ParamAttack):
            raise ValueError("the s_r axis needs a parameter attack")
        cfg.byzantine = dataclasses.replace(cfg.byzantine, attack=dataclasses.replace(attack, s_r=float(value)))
    elif axis == "rho":
        cfg.byzantine = dataclasses.replace(cfg.byzantine, rho=float(value))
    elif axis == "alpha":
        cfg.detection = dataclasses.replace(cfg.detection, alpha=float(value))
    elif axis == "K":
        cfg.optimization = dataclasses.replace(cfg.optimization, K=int(value))
    return cfg.validate()


def _sweep_one(job) -> dict:
    cfg, axis, value, seed = job
    row = {c: "" for c in SWEEP_COLUMNS}
    row.update(axis=axis, value=value, seed=seed)
    try:
        summary = run_pipeline(with_axis(cfg, axis, value, seed)).summary()
    except PhaseError as exc:  # keep what the earlier phases produced
        row["error"] = str(exc)
        summary = exc.partial.summary() if exc.partial is not None else {}
    except ValueError as exc:
        row["error"] = str(exc)
        summary = {}
    row.update({k: summary[k] for k in SWEEP_COLUMNS if k in summary})
    return row


def sweep(cfg: RunConfig, spec: SweepSpec, workers: int = 1, out_dir: str | Path | None = None) -> list[dict]:
    """One pipeline run per (value, replication); replication r uses seed ``cfg.seed + r``."""
    jobs = [(cfg, spec.axis, v, cfg.seed + r) for v in spec.values for r in range(spec.replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_sweep_csv(out / "sweep.csv", rows)
    return rows


def write_sweep_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------- connectivity


REMOVAL_MODELS = ("none", "exact", "delete-all", "pipeline")


@dataclass
class ConnectivityResult:
    model: str
    trials: int
    successes: int
    c_mp: float
    c_mp_alpha: float

    @property
    def probability(self) -> float:
        return self.successes / self.trials


def _removals_for(model: str, graph: UndirectedGraph, byz: frozenset) -> list[set]:
    adj = graph.adjacency()
    removals: list[set] = [set() for _ in range(graph.m)]
    for i in range(graph.m):
        if i in byz:
            continue
        if model == "exact":
            removals[i] = {j for j in adj[i] if j in byz}
        elif model == "delete-all":
            removals[i] = set(adj[i])
    return removals


def connectivity_study(
    m: int,
    p: float,
    rho: float,
    model: str,
    trials: int,
    seed: int = 0,
    cfg: RunConfig | None = None,
) -> ConnectivityResult:
    """Fraction of draws in which the normal nodes form the largest closed SCC after pruning.

    ``model`` picks the in-arcs cut at normal nodes: ``none``, ``exact``
    (precisely the Byzantine neighbors), ``delete-all``, or ``pipeline`` (run
    warm-up and detection with ``cfg``).  Byzantine nodes keep their in-arcs.
    """
    if model not in REMOVAL_MODELS:
        raise ValueError(f"unknown removal model {model!r}; choose from {REMOVAL_MODELS}")
    if trials < 1:
        raise ValueError("trials must be at least 1")
    base = cfg or RunConfig()
    base = dataclasses.replace(
        base,
        topology=dataclasses.replace(base.topology, m=m, p=p),
        byzantine=dataclasses.replace(base.byzantine, rho=rho),
    ).validate()
    successes = 0
    for t in range(trials):
        s = seed + t
        if model == "pipeline":
            res = run_pipeline(dataclasses.replace(base, seed=s), stop_after="pruning")
            ok = res.scc_is_normal_set
        else:
            byz = choose_byzantine(m, base.n_byzantine, s)
            graph = gen_erdos_renyi(m, p, s)
            pruned, _ = prune_and_reweight(metropolis_weights(graph), _removals_for(model, graph, byz))
            ok = largest_closed_scc(pruned) == frozenset(range(m)) - byz
        successes += int(ok)
    return ConnectivityResult(
        model=model,
        trials=trials,
        successes=successes,
        c_mp=isolation_constant(m, p),
        c_mp_alpha=connectivity_constant(m, p, beta0=base.detection.alpha),
    )
