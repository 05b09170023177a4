"""Run configuration: a nested key-value tree, read from and written to YAML.

Unknown keys are rejected.  Tagged choices (attack, warm-up rule, estimator,
scoring metric) are written as ``{kind: <name>, <param>: <value>, ...}``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .bymi import OMEGAS, Identity, OmegaSpec
from .problem import ATTACKS, AttackSpec, ParamAttack
from .robust import ESTIMATORS, RULES, CenteredClip, CoordinateMedian, RobustMeanEstimator, WarmupRule


class ConfigError(ValueError):
    pass


@dataclass
class TopologyConfig:
    m: int = 50
    p: float = 0.5
    max_resamples: int = 20


@dataclass
class TaskConfig:
    d: int = 30
    N: int = 100
    noise: float = 1.0


@dataclass
class ByzantineConfig:
    rho: float = 0.2
    attack: AttackSpec | None = field(default_factory=lambda: ParamAttack(mu_c=5.0, s_r=0.5))
    policy: str = "none"


@dataclass
class WarmupConfig:
    rule: WarmupRule = field(default_factory=CenteredClip)
    k0: int = 300
    eta: float | None = None  # default 0.5 / sqrt(k0)
    batch: int = 10


@dataclass
class DetectionConfig:
    estimator: RobustMeanEstimator = field(default_factory=CoordinateMedian)
    omega: OmegaSpec = field(default_factory=Identity)
    alpha: float = 0.2
    n: int | None = None  # default N / 2
    include_self: bool = True


@dataclass
class OptimizationConfig:
    K: int = 1500
    batch: int = 10
    t0: int | None = None


@dataclass
class OutputConfig:
    dir: str | None = None
    verbosity: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    byzantine: ByzantineConfig = field(default_factory=ByzantineConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    optimization: OptimizationConfig = field(default_factory=OptimizationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def n_ident(self) -> int:
        return self.task.N // 2 if self.detection.n is None else self.detection.n

    @property
    def n_byzantine(self) -> int:
        return int(self.byzantine.rho * self.topology.m + 1e-9)

    def validate(self) -> RunConfig:
        if not 0 <= self.byzantine.rho < 0.5:
            raise ConfigError(f"byzantine.rho must lie in [0, 0.5), got {self.byzantine.rho}")
        if not 0 < self.detection.alpha < 1:
            raise ConfigError(f"detection.alpha must lie in (0, 1), got {self.detection.alpha}")
        n = self.n_ident
        if n % 2 or not 0 < n < self.task.N:
            raise ConfigError(f"identification size {n} must be even and below N={self.task.N}")
        if not 0 <= self.topology.p <= 1:
            raise ConfigError("topology.p must lie in [0, 1]")
        positive = {
            "topology.m": self.topology.m, "task.d": self.task.d, "task.N": self.task.N,
            "warmup.batch": self.warmup.batch, "optimization.batch": self.optimization.batch,
            "topology.max_resamples": self.topology.max_resamples,
        }
        for key, val in positive.items():
            if val < 1:
                raise ConfigError(f"{key} must be positive, got {val}")
        if self.warmup.k0 < 0 or self.optimization.K < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.byzantine.policy not in ("none", "drop-all"):
            raise ConfigError(f"unknown byzantine.policy {self.byzantine.policy!r}")
        return self


def full_scale(cfg: RunConfig) -> RunConfig:
    """m=150, K=3000, k0=0.1K; N follows the dimension (100 for d=30, 200 otherwise)."""
    cfg = dataclasses.replace(cfg)
    cfg.topology = dataclasses.replace(cfg.topology, m=150, p=0.5)
    cfg.task = dataclasses.replace(cfg.task, N=100 if cfg.task.d <= 30 else 200)
    cfg.optimization = dataclasses.replace(cfg.optimization, K=3000)
    cfg.warmup = dataclasses.replace(cfg.warmup, k0=300)
    cfg.detection = dataclasses.replace(cfg.detection, n=None)
    return cfg


# ---------------------------------------------------------------- tagged choices

_TAGGED = {
    ("byzantine", "attack"): ATTACKS,
    ("warmup", "rule"): RULES,
    ("detection", "estimator"): ESTIMATORS,
    ("detection", "omega"): OMEGAS,
}


def _tagged_to_dict(obj) -> dict | None:
    if obj is None:
        return None
    return {"kind": obj.kind, **dataclasses.asdict(obj)}


def _tagged_from_dict(data, registry: dict, where: str):
    if data is None:
        return None
    if isinstance(data, str):
        data = {"kind": data}
    if not isinstance(data, dict) or "kind" not in data:
        raise ConfigError(f"{where}: expected a mapping with a 'kind' key")
    params = dict(data)
    kind = params.pop("kind")
    if kind not in registry:
        raise ConfigError(f"{where}: unknown kind {kind!r}; choose from {sorted(registry)}")
    cls = registry[kind]
    allowed = {f.name for f in dataclasses.fields(cls)}
    extra = set(params) - allowed
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)} for kind {kind!r}")
    try:
        return cls(**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def to_dict(cfg: RunConfig) -> dict[str, Any]:
    out: dict[str, Any] = {"seed": cfg.seed}
    for section in dataclasses.fields(cfg):
        if section.name == "seed":
            continue
        sub = getattr(cfg, section.name)
        entry = {}
        for f in dataclasses.fields(sub):
            val = getattr(sub, f.name)
            entry[f.name] = _tagged_to_dict(val) if (section.name, f.name) in _TAGGED else val
        out[section.name] = entry
    return out


def from_dict(data: dict[str, Any] | None) -> RunConfig:
    data = dict(data or {})
    cfg = RunConfig()
    sections = {f.name: f for f in dataclasses.fields(RunConfig)}
    extra = set(data) - set(sections)
    if extra:
        raise ConfigError(f"unknown top-level keys {sorted(extra)}")
    if "seed" in data:
        cfg.seed = data.pop("seed")
    for name, body in data.items():
        if not isinstance(body, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        current = getattr(cfg, name)
        allowed = {f.name for f in dataclasses.fields(current)}
        unknown = set(body) - allowed
        if unknown:
            raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
        updates = {}
        for key, val in body.items():
            if (name, key) in _TAGGED:
                val = _tagged_from_dict(val, _TAGGED[(name, key)], f"{name}.{key}")
            updates[key] = val
        setattr(cfg, name, dataclasses.replace(current, **updates))
    return cfg.validate()


def loads(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return from_dict(data)


def dumps(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def load(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)
