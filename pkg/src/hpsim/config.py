"""JSON run configuration.

Layout (every section optional except ``model``)::

    {
      "model":   {"input_shape": [3, 8, 8], "conv_layers": [...], "fc_layers": [...]},
      "cluster": {"n_workers": 2, "per_worker_batch": 8, "scheme": "B",
                  "variable_batch": false, "precision": "double", "seed": 0},
      "hyper":   {"lr": 0.01, "momentum": 0.9, "weight_decay": 0.0005, "epochs": 90,
                  "milestones": [0.25, 0.5, 0.75], "factor": 0.1587..., "fc_lr": null},
      "data":    {"num_examples": 512, "input_shape": [3, 8, 8], "num_classes": 10,
                  "seed": 0, "generator": "gaussian_blobs", "separation": 10.0},
      "cost":    {"flops_per_sec": 2e12, "link_bandwidth": 6e9, "element_size": 4,
                  "cross_subset_penalty": 0.5, "host_hop_latency": 1e-05,
                  "backward_flops_ratio": 2.0, "subsets": null},
      "output_dir": "runs/default",
      "steps": 200
    }

``steps: null`` trains for ``hyper.epochs`` full passes over the data.
``cost.subsets: null`` groups workers four to a subset.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from hpsim.cluster import ClusterConfig
from hpsim.cost import CostParams, Topology
from hpsim.data import DatasetSpec
from hpsim.exceptions import ConfigurationError, HPSimError
from hpsim.model import ModelSpec, toy_spec
from hpsim.optimizer import HyperParams

OUTPUT_DIR_ENV = "HPSIM_OUTPUT_DIR"


def _section(path: str, build, raw):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected an object, got {type(raw).__name__}")
    try:
        return build(raw)
    except HPSimError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec = field(default_factory=toy_spec)
    cluster: ClusterConfig = field(default_factory=lambda: ClusterConfig(2, 8, "B"))
    hyper: HyperParams = field(default_factory=HyperParams)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    cost: CostParams = field(default_factory=CostParams)
    subsets: tuple[tuple[int, ...], ...] | None = None
    output_dir: str = "runs/default"
    steps: int | None = 200

    def __post_init__(self):
        if self.subsets is not None:
            object.__setattr__(self, "subsets", tuple(tuple(s) for s in self.subsets))
        self.validate()

    def validate(self) -> None:
        k, b = self.cluster.n_workers, self.cluster.per_worker_batch
        if self.data.input_shape != self.model.input_shape:
            raise ConfigurationError(
                f"data.input_shape {list(self.data.input_shape)} != model.input_shape {list(self.model.input_shape)}"
            )
        if self.data.num_classes != self.model.num_classes:
            raise ConfigurationError(
                f"data.num_classes {self.data.num_classes} != model.fc_layers[-1].out_dim {self.model.num_classes}"
            )
        if self.data.num_examples < k * b:
            raise ConfigurationError(
                f"data.num_examples {self.data.num_examples} < cluster.n_workers * cluster.per_worker_batch = {k * b}"
            )
        if self.steps is not None and self.steps < 0:
            raise ConfigurationError("steps: must be non-negative")
        if self.subsets is not None:
            try:
                self.topology()
            except ConfigurationError as exc:
                raise ConfigurationError(f"cost.subsets: {exc}") from exc

    def topology(self) -> Topology:
        if self.subsets is None:
            return Topology.grouped(self.cluster.n_workers)
        return Topology(self.cluster.n_workers, self.subsets)

    def steps_per_epoch(self) -> int:
        return self.data.num_examples // (self.cluster.n_workers * self.cluster.per_worker_batch)

    def total_steps(self) -> int:
        return self.steps if self.steps is not None else self.hyper.epochs * self.steps_per_epoch()

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV) or self.output_dir)

    def to_dict(self) -> dict:
        cost = self.cost.to_dict()
        cost["subsets"] = None if self.subsets is None else [list(s) for s in self.subsets]
        return {
            "model": self.model.to_dict(),
            "cluster": self.cluster.to_dict(),
            "hyper": self.hyper.to_dict(),
            "data": self.data.to_dict(),
            "cost": cost,
            "output_dir": self.output_dir,
            "steps": self.steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigurationError("config root must be a JSON object")
        unknown = set(d) - {"model", "cluster", "hyper", "data", "cost", "output_dir", "steps"}
        if unknown:
            raise ConfigurationError(f"unknown top-level keys: {sorted(unknown)}")
        if "model" not in d:
            raise ConfigurationError("model: required section missing")
        model = _section("model", ModelSpec.from_dict, d["model"])
        cluster = _section("cluster", ClusterConfig.from_dict, d.get("cluster", {}))
        hyper = _section("hyper", HyperParams.from_dict, d.get("hyper", {}))
        data_raw = dict(d.get("data", {}))
        data_raw.setdefault("input_shape", list(model.input_shape))
        data_raw.setdefault("num_classes", model.num_classes)
        data = _section("data", DatasetSpec.from_dict, data_raw)
        cost_raw = dict(d.get("cost", {}))
        subsets = cost_raw.pop("subsets", None)
        cost = _section("cost", lambda raw: CostParams(**raw), cost_raw)
        return cls(
            model=model,
            cluster=cluster,
            hyper=hyper,
            data=data,
            cost=cost,
            subsets=subsets,
            output_dir=d.get("output_dir", "runs/default"),
            steps=d.get("steps", 200),
        )

    def with_overrides(self, seed: int | None = None, precision: str | None = None) -> "RunConfig":
        cluster, data = self.cluster, self.data
        if seed is not None:
            cluster = replace(cluster, seed=seed)
            data = replace(data, seed=seed)
        if precision is not None:
            cluster = replace(cluster, precision=precision)
        return replace(self, cluster=cluster, data=data)


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(raw)


def dump_config(config: RunConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")
