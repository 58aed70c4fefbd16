"""End-to-end drivers behind the CLI: training, equivalence checks, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from hpsim.cluster import SCHEMES, Cluster
from hpsim.config import RunConfig
from hpsim.cost import Timeline, scheme_step_model
from hpsim.data import epoch_batches, generate
from hpsim.exceptions import ConfigurationError
from hpsim.model import Model, ModelSpec, init_model
from hpsim.optimizer import lr_at
from hpsim.reference import SingleWorkerSGD, max_relative_divergence

logger = logging.getLogger(__name__)

CSV_HEADER = (
    "step",
    "epoch",
    "loss",
    "lr",
    "bytes_fc_activations",
    "bytes_fc_gradients",
    "bytes_fc_internal",
    "bytes_conv_sync",
    "sim_step_time_s",
    "wall_time_s",
)
EQUIVALENCE_THRESHOLD = 1e-8


@dataclass(frozen=True)
class MetricsRow:
    step: int
    epoch: int
    loss: float
    lr: float
    bytes_fc_activations: int
    bytes_fc_gradients: int
    bytes_fc_internal: int
    bytes_conv_sync: int
    sim_step_time_s: float
    wall_time_s: float

    def as_csv(self) -> list[str]:
        return [
            str(self.step),
            str(self.epoch),
            repr(self.loss),
            repr(self.lr),
            str(self.bytes_fc_activations),
            str(self.bytes_fc_gradients),
            str(self.bytes_fc_internal),
            str(self.bytes_conv_sync),
            repr(self.sim_step_time_s),
            f"{self.wall_time_s:.6f}",
        ]


def iter_steps(config: RunConfig, total_steps: int):
    """Yield ``(step, epoch, example_indices)`` for ``total_steps`` steps."""
    per_step = config.cluster.n_workers * config.cluster.per_worker_batch
    step, epoch = 0, 0
    while step < total_steps:
        for idx in epoch_batches(config.data.num_examples, per_step, config.data.seed, epoch):
            if step >= total_steps:
                return
            yield step, epoch, idx
            step += 1
        epoch += 1


def cost_timeline(config: RunConfig) -> Timeline:
    return scheme_step_model(config.model, config.cluster, config.topology(), config.cost)


def train(config: RunConfig, output_dir: Path | None = None) -> list[MetricsRow]:
    """Run the configured training and write ``metrics.csv`` plus a checkpoint."""
    out = Path(output_dir) if output_dir is not None else config.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    inputs, targets = generate(config.data, config.cluster.precision)
    cluster = Cluster.from_spec(config.model, config.cluster, config.hyper)
    sim_step = cost_timeline(config).step_time
    total = config.total_steps()
    hp = config.hyper
    rows: list[MetricsRow] = []
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for step, epoch, idx in iter_steps(config, total):
            lr = lr_at(step / total, hp.lr, hp.milestones, hp.factor)
            t0 = time.perf_counter()
            result = cluster.run_step(inputs[idx], targets[idx], lr)
            row = MetricsRow(
                step + 1,
                epoch,
                result.loss,
                lr,
                result.bytes["fc_activations"],
                result.bytes["fc_gradients"],
                result.bytes["fc_internal"],
                result.bytes["conv_sync"],
                sim_step,
                time.perf_counter() - t0,
            )
            writer.writerow(row.as_csv())
            rows.append(row)
            if step % 50 == 0:
                logger.info("step %d epoch %d loss %.6f lr %.6g", step + 1, epoch, result.loss, lr)
    save_checkpoint(cluster.gather_model(), out / "checkpoint")
    return rows


def verify_equivalence(
    config: RunConfig,
    steps: int = 5,
    schemes: tuple[str, ...] = SCHEMES,
    fault: str | None = None,
) -> dict[str, float | None]:
    """Max relative parameter divergence of each scheme from single-worker SGD at batch ``K*b``.

    Runs in double precision with one update per step.  A scheme that the
    configuration cannot run (scheme C with ``K`` not dividing ``b``) maps
    to ``None``.
    """
    if config.cluster.variable_batch:
        raise ConfigurationError("cluster.variable_batch: equivalence holds only for uniform updates")
    cfg = config.with_overrides(precision="double")
    inputs, targets = generate(cfg.data, "double")
    base = init_model(cfg.model, cfg.cluster.seed, "double")
    oracle = SingleWorkerSGD(base, cfg.hyper)
    batches = list(iter_steps(cfg, steps))
    for _, _, idx in batches:
        oracle.step(inputs[idx], targets[idx])
    reference = oracle.model.params
    report: dict[str, float | None] = {}
    for scheme in schemes:
        try:
            cluster_cfg = replace(cfg.cluster, scheme=scheme)
        except ConfigurationError:
            report[scheme] = None
            continue
        cluster = Cluster(base, cluster_cfg, cfg.hyper, fault=fault)
        for _, _, idx in batches:
            cluster.run_step(inputs[idx], targets[idx])
        # every replica is compared, so a broken sync cannot hide behind worker 0
        report[scheme] = max(
            max_relative_divergence(cluster.gather_model().params, reference),
            *(max_relative_divergence(w.conv_params, oracle.model.conv_params) for w in cluster.workers),
        )
    return report


def save_checkpoint(model: Model, directory: Path) -> None:
    """Raw little-endian arrays, one file per tensor, plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    for name, tensor in zip(model.param_names(), model.params):
        fname = f"{name}.bin"
        tensor.astype(tensor.dtype.newbyteorder("<"), copy=False).tofile(directory / fname)
        tensors.append({"name": name, "shape": list(tensor.shape), "file": fname})
    manifest = {
        "precision": model.precision,
        "byte_order": "little",
        "seed": model.rng_seed,
        "spec": model.spec.to_dict(),
        "tensors": tensors,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(directory: Path) -> Model:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec = ModelSpec.from_dict(manifest["spec"])
    dtype = np.dtype("<f4" if manifest["precision"] == "single" else "<f8")
    params = [
        np.fromfile(directory / t["file"], dtype=dtype).reshape(t["shape"]).astype(dtype.newbyteorder("="))
        for t in manifest["tensors"]
    ]
    n_conv = 2 * len(spec.conv_layers)
    return Model(spec, params[:n_conv], params[n_conv:], manifest["seed"])
