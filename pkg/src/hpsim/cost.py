"""Analytical step-time model for hybrid-parallel training.

Nothing here times real execution: durations come from FLOP counts and byte
counts divided by configured rates, so predictions are platform independent.

Conventions
-----------
* Forward FLOPs per example come from :func:`hpsim.model.count_stats`;
  the backward pass costs ``backward_flops_ratio`` (default 2) times the
  forward pass.
* A sender fanning out to ``n`` receivers splits its link bandwidth evenly
  over the ``n`` flows.  The same rule applies to a receiver fanned into.
* Flows between workers of different topology subsets run at
  ``cross_subset_penalty`` of the link rate and pay ``host_hop_latency``.
* Schemes B and C overlap the exchange of sub-batch ``j + 1`` with the FC
  work on sub-batch ``j``, and the gradient return of sub-batch ``j`` with
  the FC work on ``j + 1``.  Scheme A overlaps nothing.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

from hpsim.cluster import ClusterConfig, shard_slices
from hpsim.exceptions import ConfigurationError
from hpsim.model import ModelSpec, count_stats


@dataclass(frozen=True)
class CostParams:
    flops_per_sec: float = 2e12
    link_bandwidth: float = 6e9
    element_size: int = 4
    cross_subset_penalty: float = 0.5
    host_hop_latency: float = 10e-6
    backward_flops_ratio: float = 2.0

    def __post_init__(self):
        if self.flops_per_sec <= 0 or self.link_bandwidth <= 0 or self.element_size <= 0:
            raise ConfigurationError("flops_per_sec, link_bandwidth and element_size must be positive")
        if not 0 < self.cross_subset_penalty <= 1:
            raise ConfigurationError("cross_subset_penalty must lie in (0, 1]")
        if self.host_hop_latency < 0 or self.backward_flops_ratio < 0:
            raise ConfigurationError("host_hop_latency and backward_flops_ratio must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Topology:
    """Workers grouped into subsets that talk among themselves at full speed."""

    n_workers: int
    subsets: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "subsets", tuple(tuple(s) for s in self.subsets))
        members = sorted(w for s in self.subsets for w in s)
        if members != list(range(self.n_workers)):
            raise ConfigurationError(f"subsets {self.subsets} do not partition 0..{self.n_workers - 1}")

    @classmethod
    def grouped(cls, n_workers: int, group_size: int = 4) -> "Topology":
        """Consecutive groups of ``group_size``; the 8-GPU machine is ``grouped(8, 4)``."""
        return cls(n_workers, tuple(tuple(range(i, min(i + group_size, n_workers))) for i in range(0, n_workers, group_size)))

    def same_subset(self, a: int, b: int) -> bool:
        return any(a in s and b in s for s in self.subsets)


def compute_time(flops: float, params: CostParams) -> float:
    return flops / params.flops_per_sec


def comm_time(nbytes: float, params: CostParams, same_subset: bool = True, concurrent_flows: int = 1) -> float:
    """Seconds to move ``nbytes`` on one of ``concurrent_flows`` flows sharing a link."""
    rate = params.link_bandwidth / max(concurrent_flows, 1)
    if same_subset:
        return nbytes / rate
    return nbytes / (rate * params.cross_subset_penalty) + params.host_hop_latency


def fc_matmul_balance(dim: int, params: CostParams = CostParams(), n_workers: int = 8) -> dict:
    """Per-example cost of one model-parallel ``dim x dim`` layer on one worker.

    Each worker multiplies by a ``dim x dim/K`` slice and must receive the
    ``dim`` input activations.
    """
    compute_s = compute_time(dim * (dim / n_workers) * 2, params)
    comm_s = dim * params.element_size / params.link_bandwidth
    return {"compute_s": compute_s, "comm_s": comm_s, "comm_bound": comm_s > compute_s}


def exchange_bottleneck_bytes(scheme: str, n_workers: int, batch: int, activation_bytes: int) -> int:
    """Bytes sent by the busiest worker in one activation exchange."""
    if scheme in ("A", "B"):
        return (n_workers - 1) * batch * activation_bytes
    if scheme == "C":
        return (n_workers - 1) * (batch // n_workers) * activation_bytes
    raise ConfigurationError(f"unknown scheme {scheme!r}")


@dataclass(frozen=True)
class Interval:
    worker: int
    t0: float
    t1: float
    kind: str
    label: str

    @property
    def duration(self) -> float:
        return self.t1 - self.t0


BOUNDARY_PREFIXES = ("exchange", "return")


def _is_boundary(iv: Interval) -> bool:
    return iv.kind == "comm" and iv.label.startswith(BOUNDARY_PREFIXES)


def _is_busy(iv: Interval) -> bool:
    # FC-internal collectives are part of the FC pass itself
    return iv.kind == "compute" or (iv.kind == "comm" and iv.label.startswith("fc_"))


def _merge(intervals: list[tuple[float, float]]) -> list[tuple[float, float]]:
    merged: list[list[float]] = []
    for t0, t1 in sorted(intervals):
        if merged and t0 <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], t1)
        else:
            merged.append([t0, t1])
    return [(a, b) for a, b in merged]


@dataclass
class Timeline:
    n_workers: int
    scheme: str
    events: list[Interval] = field(default_factory=list)
    step_time: float = 0.0
    speedup: float = 1.0
    single_worker_step_time: float = 0.0
    exchange_bottleneck_bytes: int = 0

    def add(self, worker: int, t0: float, t1: float, kind: str, label: str) -> None:
        self.events.append(Interval(worker, t0, t1, kind, label))

    @property
    def hidden_comm_fraction(self) -> float | None:
        """Share of activation-exchange and gradient-return time overlapped by FC work.

        ``None`` when there is no such communication (one worker).
        """
        boundary = {(iv.t0, iv.t1, iv.label) for iv in self.events if _is_boundary(iv) and iv.duration > 0}
        if not boundary:
            return None
        busy = _merge([(iv.t0, iv.t1) for iv in self.events if _is_busy(iv)])
        total = hidden = 0.0
        for t0, t1, _ in sorted(boundary):
            total += t1 - t0
            for b0, b1 in busy:
                hidden += max(0.0, min(t1, b1) - max(t0, b0))
        return hidden / total

    def compute_seconds(self, worker: int) -> float:
        return sum(iv.duration for iv in self.events if iv.worker == worker and iv.kind == "compute")

    def phase_totals(self) -> dict[str, float]:
        """Wall-clock seconds spent per phase family, counted once across workers."""
        seen: dict[str, set] = {}
        for iv in self.events:
            family = iv.label.split("[")[0]
            seen.setdefault(family, set()).add((iv.t0, iv.t1, iv.label))
        return {k: sum(t1 - t0 for t0, t1, _ in v) for k, v in seen.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["worker", "t0", "t1", "kind", "label"])
        for iv in self.events:
            writer.writerow([iv.worker, repr(iv.t0), repr(iv.t1), iv.kind, iv.label])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "n_workers": self.n_workers,
            "scheme": self.scheme,
            "step_time_s": self.step_time,
            "single_worker_step_time_s": self.single_worker_step_time,
            "speedup": self.speedup,
            "hidden_comm_fraction": self.hidden_comm_fraction,
            "exchange_bottleneck_bytes": self.exchange_bottleneck_bytes,
            "phase_totals_s": self.phase_totals(),
        }


def _pair_time(topo: Topology, senders, nbytes: float, params: CostParams) -> float:
    """Slowest flow when each sender fans ``nbytes`` out to every other worker."""
    k = topo.n_workers
    if k == 1 or nbytes == 0:
        return 0.0
    return max(
        comm_time(nbytes, params, topo.same_subset(s, r), concurrent_flows=k - 1)
        for s in senders
        for r in range(k)
        if r != s
    )


def _max_shard(n: int, k: int) -> int:
    return max(s.stop - s.start for s in shard_slices(n, k))


def _schedule(spec: ModelSpec, cluster: ClusterConfig, topo: Topology, params: CostParams) -> Timeline:
    k, b, scheme = cluster.n_workers, cluster.per_worker_batch, cluster.scheme
    stats = count_stats(spec)
    es = params.element_size
    act_bytes = stats.last_conv_activation_size * es
    bwd = params.backward_flops_ratio
    everyone = range(k)
    tl = Timeline(k, scheme)
    tl.exchange_bottleneck_bytes = exchange_bottleneck_bytes(scheme, k, b, act_bytes) if k > 1 else 0

    def span_all(t0: float, dt: float, kind: str, label: str) -> float:
        for w in everyone:
            tl.add(w, t0, t0 + dt, kind, label)
        return t0 + dt

    rows = k * b if scheme == "A" else b
    n_pass = 1 if scheme == "A" else k
    layers = spec.fc_layers
    fc_fwd = [compute_time(f * rows * _max_shard(l.out_dim, k) / l.out_dim, params) for f, l in zip(stats.fc_layer_flops, layers)]
    gather = [_pair_time(topo, everyone, rows * _max_shard(l.out_dim, k) * es, params) for l in layers]

    if scheme == "A":
        x_bytes, senders = b * act_bytes, lambda j: everyone
    elif scheme == "B":
        x_bytes, senders = b * act_bytes, lambda j: (j,)
    else:
        x_bytes, senders = (b // k) * act_bytes, lambda j: everyone

    def fc_pass(t: float, j: int) -> float:
        for i in range(len(layers)):
            t = span_all(t, fc_fwd[i], "compute", f"fc_fwd[{j}]")
            if i < len(layers) - 1 and gather[i] > 0:
                t = span_all(t, gather[i], "comm", f"fc_allgather[{j}]")
        for i in reversed(range(len(layers))):
            t = span_all(t, fc_fwd[i] * bwd, "compute", f"fc_bwd[{j}]")
            if i > 0 and gather[i - 1] > 0:
                t = span_all(t, gather[i - 1], "comm", f"fc_reduce_scatter[{j}]")
        return t

    t = span_all(0.0, compute_time(stats.conv_flops * b, params), "compute", "conv_fwd")
    x_end = fc_end = r_end = t
    for j in range(n_pass):
        tx = _pair_time(topo, senders(j), x_bytes, params)
        x_start, x_end = x_end, x_end + tx
        if tx > 0:
            for s in senders(j):
                tl.add(s, x_start, x_end, "comm", f"exchange[{j}]")
        fc_start = max(x_end, fc_end) if scheme != "A" else x_end
        fc_end = fc_pass(fc_start, j)
        # owners receive what they sent; the fan-in mirrors the fan-out
        r_start = max(fc_end, r_end)
        r_end = r_start + tx
        if tx > 0:
            for s in senders(j):
                tl.add(s, r_start, r_end, "comm", f"return[{j}]")
        if scheme == "A":
            x_end = fc_end = r_end
    t = span_all(max(fc_end, r_end), compute_time(stats.conv_flops * b * bwd, params), "compute", "conv_bwd")
    shard_bytes = _max_shard(stats.conv_params, k) * es
    sync = 2 * _pair_time(topo, everyone, shard_bytes, params)
    if sync > 0:
        t = span_all(t, sync, "comm", "sync")
    tl.step_time = t
    return tl


def scheme_step_model(
    spec: ModelSpec,
    cluster: ClusterConfig,
    topo: Topology | None = None,
    params: CostParams = CostParams(),
) -> Timeline:
    """Simulated timeline of one step, with speedup relative to one worker at the same per-worker batch."""
    topo = topo or Topology.grouped(cluster.n_workers)
    if topo.n_workers != cluster.n_workers:
        raise ConfigurationError(f"topology has {topo.n_workers} workers, cluster has {cluster.n_workers}")
    tl = _schedule(spec, cluster, topo, params)
    single = ClusterConfig(1, cluster.per_worker_batch, "B", False, cluster.precision, cluster.seed)
    t1 = _schedule(spec, single, Topology(1, ((0,),)), params).step_time
    tl.single_worker_step_time = t1
    tl.speedup = cluster.n_workers * t1 / tl.step_time
    return tl
