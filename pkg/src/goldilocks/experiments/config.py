"""Experiment configuration: JSON schema, defaults, ``--set`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from ..autodiff import NetworkArchitecture
from ..errors import ConfigurationError

CONFIG_VERSION = 1
EXPERIMENTS = ("curvature-sweep", "contours", "loss-scaling", "tr-vs-norm",
               "init-select", "radius-drift", "wick", "stokes")


def default_rho_grid() -> list[float]:
    return [float(v) for v in np.logspace(-2, 3, 25)]


@dataclass
class ArchitectureConfig:
    layer_sizes: list[int] = field(default_factory=lambda: [784, 64, 64, 10])
    nonlinearity: str = "relu"

    def build(self) -> NetworkArchitecture:
        return NetworkArchitecture(tuple(self.layer_sizes), self.nonlinearity)


@dataclass
class DatasetConfig:
    # "mnist" reads images_path/labels_path, or the bundled 5000-sample subset
    source: str = "mnist"
    images_path: str | None = None
    labels_path: str | None = None
    data_dir: str | None = None
    n_train: int = 4000
    n_eval: int = 1000
    split_seed: int = 0
    shuffle_labels: bool = False
    # synthetic blobs
    n_classes: int = 10
    n_per_class: int = 500
    spread: float = 0.3


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    steps: int = 2000
    epochs: int | None = None
    batch_size: int = 128
    eval_every: int = 500
    eval_size: int | None = None


@dataclass
class HessianConfig:
    eval_batch_size: int = 256
    hvp_eps: float | None = None
    freeze_pattern: bool = True
    probes: int = 30
    samples_per_r: int = 200
    wick_samples: int = 100000
    at_anchor: bool = False


@dataclass
class ChartConfig:
    scheme: str = "xavier"
    nnz_law: dict = field(default_factory=lambda: {"kind": "uniform_fraction", "low": 1 / 200, "high": 1 / 20})
    metric_scale: float = 1.0
    overlap_bound: float | None = 0.1
    charts_per_anchor: int = 1


@dataclass
class ExperimentConfig:
    experiment: str = "curvature-sweep"
    version: int = CONFIG_VERSION
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    rho_grid: list[float] = field(default_factory=default_rho_grid)
    d_grid: list[int] = field(default_factory=lambda: [20])
    kinds: list[str] = field(default_factory=lambda: ["hyperplane"])
    seeds: int = 10
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    hessian: HessianConfig = field(default_factory=HessianConfig)
    chart: ChartConfig = field(default_factory=ChartConfig)
    # experiment-specific knobs (fit ranges, tolerances, ...)
    params: dict = field(default_factory=dict)
    out_dir: str = "results"
    threads: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.version != CONFIG_VERSION:
            raise ConfigurationError(f"unsupported config version {self.version}")
        if self.experiment not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        self.architecture.build()
        if not self.rho_grid or any(not r > 0 for r in self.rho_grid):
            raise ConfigurationError("rho_grid must be nonempty and positive")
        if not self.d_grid or any(int(d) != d or d < 0 for d in self.d_grid):
            raise ConfigurationError("d_grid must be nonempty with nonnegative integers")
        if self.seeds < 1:
            raise ConfigurationError("need at least one seed")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")
        bad = set(self.kinds) - {"hyperplane", "sphere"}
        if not self.kinds or bad:
            raise ConfigurationError(f"bad chart kinds {sorted(bad)}")
        if self.dataset.source not in ("mnist", "synthetic"):
            raise ConfigurationError(f"unknown dataset source {self.dataset.source!r}")
        if self.chart.charts_per_anchor < 1:
            raise ConfigurationError("charts_per_anchor must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data, "config").validate()

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        default = getattr(defaults, name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = copy.deepcopy(value)
    return cls(**kwargs)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``key.sub=value`` strings; values are parsed as JSON when possible."""
    data = copy.deepcopy(data)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"cannot descend into {part!r} in {key!r}")
        node[parts[-1]] = value
    return data


def default_config(experiment: str) -> ExperimentConfig:
    """Desk-scale defaults for each experiment."""
    cfg = ExperimentConfig(experiment=experiment)
    if experiment == "contours":
        cfg.kinds = ["hyperplane", "sphere"]
        cfg.rho_grid = [0.1, 0.3, 1.0, 3.0, 10.0, 30.0]
        cfg.d_grid = [5, 10, 20, 40]
        cfg.seeds = 3
    elif experiment == "loss-scaling":
        cfg.architecture = ArchitectureConfig([784, 32, 32, 10])
        cfg.rho_grid = [float(v) for v in np.logspace(-2, 3, 21)]
        cfg.d_grid = [0]
        cfg.seeds = 5
        cfg.params = {"flat_max_rho": 0.3, "slope_decades": 1.0}
    elif experiment == "tr-vs-norm":
        cfg.architecture = ArchitectureConfig([784, 32, 32, 10])
        cfg.d_grid = [10, 20, 40]
        cfg.seeds = 3
        cfg.params = {"flat_decades": 1.0}
    elif experiment == "init-select":
        cfg.architecture = ArchitectureConfig([784, 32, 32, 10])
        cfg.rho_grid = [1.0]
        cfg.seeds = 50
        cfg.optimizer.epochs = 3
        cfg.params = {"control": True}
    elif experiment == "radius-drift":
        cfg.rho_grid = [0.3]
        cfg.d_grid = [0]
        cfg.optimizer.epochs = 10
        cfg.optimizer.batch_size = 128
    elif experiment == "wick":
        cfg.rho_grid = [1.0]
        cfg.d_grid = [10, 20, 40, 80, 160]
        cfg.seeds = 2
        cfg.params = {"D": 1000, "quad_D": 500, "mean_se": 3.0, "var_rel_tol": 0.1, "live_samples": 20000,
                      "live_var_rel_tol": 0.1, "r2_min": 0.99, "ratio_rel_tol": 0.25}
    elif experiment == "stokes":
        cfg.architecture = ArchitectureConfig([784, 12, 12, 10])
        cfg.rho_grid = [0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.15]
        cfg.params = {"D": 200, "analytic_tol": 1e-9, "rel_tol": 0.1}
    return cfg.validate()
