"""Flat experiment configuration with file round-tripping and a stable hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from cali3f.aggregation import CaliConfig, DittoConfig
from cali3f.federation import STRATEGIES, ClusterConfig
from cali3f.models import VARIANTS, TrainConfig

FORMATS = ("tab", "double-colon")


class ConfigError(ValueError):
    """Raised with every validation problem found, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))


@dataclass
class ExperimentConfig:
    dataset: str = ""
    format: str = "tab"
    min_interactions: int = 0
    model: str = "neumf"
    strategy: str = "cali3f"
    rounds: int = 100
    clusters: int = 30
    delegates: int = 30
    recluster_every: int = 1
    personalize: bool = True
    clus_avg: bool = True
    # local training
    lr: float = 0.05
    local_epochs: int = 2
    batch_size: int = 64
    embedding_dim: int = 8
    mlp_widths: list[int] = field(default_factory=lambda: [32, 16, 8])
    init_seed: int | None = None
    neg_ratio: int = 4
    # server side
    phi: float = 0.1
    lambda0: float = 0.5
    decay: float = 1.0
    server_lr: float = 1.0
    epsilon_norm: float = 1e-12
    item_weighting: str = "component"
    # ditto
    ditto_reg: float = 0.1
    ditto_lr: float | None = None
    ditto_local_steps: int | None = None
    # run control
    seeds: list[int] = field(default_factory=lambda: [0])
    eval_every: int = 1
    checkpoint_every: int = 10
    out: str = "runs"

    def __post_init__(self):
        self.mlp_widths = [int(w) for w in self.mlp_widths]
        self.seeds = [int(s) for s in self.seeds]

    # -- validation -------------------------------------------------------
    def problems(self, num_clients: int | None = None) -> list[str]:
        out = []
        if self.format not in FORMATS:
            out.append(f"format must be one of {FORMATS}, got {self.format!r}")
        if self.model not in VARIANTS:
            out.append(f"model must be one of {VARIANTS}, got {self.model!r}")
        if self.strategy not in STRATEGIES:
            out.append(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        for name in ("rounds", "clusters", "delegates", "recluster_every", "local_epochs", "batch_size",
                     "embedding_dim", "eval_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        for name in ("neg_ratio", "min_interactions"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0")
        if self.lr <= 0:
            out.append("lr must be > 0")
        if self.phi < 0:
            out.append("phi must be >= 0")
        if not 0 <= self.lambda0 <= 1:
            out.append("lambda0 must lie in [0, 1]")
        if not 0 < self.decay <= 1:
            out.append("decay must lie in (0, 1]")
        if self.server_lr <= 0:
            out.append("server_lr must be > 0")
        if self.ditto_reg < 0:
            out.append("ditto_reg must be >= 0")
        if self.item_weighting not in ("component", "row"):
            out.append("item_weighting must be 'component' or 'row'")
        if not self.seeds:
            out.append("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            out.append("seeds must be distinct")
        if any(w < 1 for w in self.mlp_widths) or (self.model != "gmf" and not self.mlp_widths):
            out.append("mlp_widths must be positive and non-empty for mlp/neumf")
        if num_clients is not None:
            if self.delegates > num_clients:
                out.append(f"delegates ({self.delegates}) exceeds the number of clients ({num_clients})")
            if self.strategy == "cali3f" and self.clusters > num_clients:
                out.append(f"clusters ({self.clusters}) exceeds the number of clients ({num_clients})")
        return out

    def validate(self, num_clients: int | None = None) -> "ExperimentConfig":
        problems = self.problems(num_clients)
        if problems:
            raise ConfigError(problems)
        return self

    # -- component configs ------------------------------------------------
    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, local_epochs=self.local_epochs, batch_size=self.batch_size,
                           embedding_dim=self.embedding_dim, mlp_widths=tuple(self.mlp_widths),
                           init_seed=self.init_seed, neg_ratio=self.neg_ratio)

    def cali_config(self) -> CaliConfig:
        return CaliConfig(phi=self.phi, lambda0=self.lambda0, decay=self.decay, server_lr=self.server_lr,
                          epsilon_norm=self.epsilon_norm, item_weighting=self.item_weighting)

    def cluster_config(self) -> ClusterConfig:
        return ClusterConfig(n_clusters=self.clusters, delegates=self.delegates,
                             recluster_every=self.recluster_every, personalize=self.personalize,
                             clus_avg=self.clus_avg)

    def ditto_config(self) -> DittoConfig:
        return DittoConfig(reg=self.ditto_reg, lr=self.ditto_lr, local_steps=self.ditto_local_steps)

    def federation_kwargs(self) -> dict[str, Any]:
        return dict(variant=self.model, strategy=self.strategy, train=self.train_config(),
                    cali=self.cali_config(), cluster=self.cluster_config(), ditto=self.ditto_config())

    # -- serialisation ----------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in unknown])
        return cls(**data)

    def dump(self, path) -> None:
        path = Path(path)
        data = self.to_dict()
        if path.suffix in (".yaml", ".yml"):
            text = yaml.safe_dump(data, sort_keys=True)
        else:
            text = json.dumps(data, indent=2, sort_keys=True) + "\n"
        path.write_text(text, encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(read_config_file(path))

    def hash(self) -> str:
        """Digest of everything that affects per-round results.

        Seeds, output paths and the round budget are left out: a run extended
        from T to T' rounds reproduces the first T records exactly.
        """
        data = self.to_dict()
        for k in ("seeds", "out", "checkpoint_every", "rounds"):
            data.pop(k)
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def read_config_file(path) -> dict[str, Any]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return {k.replace("-", "_"): v for k, v in data.items()}
