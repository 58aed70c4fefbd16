"""Simulated K-worker hybrid-parallel training step.

Convolutional layers are data parallel: every worker holds a full replica of
the conv parameters and runs its own ``b`` examples.  Fully connected layers
are model parallel: each FC weight matrix is split by output columns, worker
``k`` owning the ``k``-th contiguous column block (the last block absorbs any
remainder).  At the boundary the flattened last conv activations move
between workers under one of three schemes:

``A``  every worker gathers all ``K * b`` examples, one FC pass.
``B``  workers take turns broadcasting their ``b`` examples, ascending id,
       giving ``K`` FC passes of ``b`` examples.
``C``  for pass ``j`` every worker contributes rows ``[j*b/K, (j+1)*b/K)``
       of its batch; the sub-batch is ordered by contributor id, then row.

Because each worker only owns some FC columns, the gradient it computes for
the FC input is a partial sum.  Partials are sent back to the worker that
produced each example, which adds them in ascending worker id.  Messages are
in-memory hand-offs; bytes are ``size * itemsize`` of what is handed off.

All cross-worker sums accumulate in ascending worker id, and the step runs
as a single-threaded, phase-ordered schedule, so results are bit-reproducible.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from hpsim import tensor as T
from hpsim.exceptions import ConfigurationError, UsageError
from hpsim.model import Model, ModelSpec, conv_stack_backward, conv_stack_forward, init_model
from hpsim.optimizer import HyperParams, OptimizerState

MESSAGE_CLASSES = ("fc_activations", "fc_gradients", "fc_internal", "conv_sync")
SCHEMES = ("A", "B", "C")
PASS_PHASES = ("conv_fwd", "fc_fwd", "fc_bwd", "conv_bwd")


@dataclass(frozen=True)
class ClusterConfig:
    n_workers: int = 2
    per_worker_batch: int = 128
    scheme: str = "B"
    variable_batch: bool = False
    precision: str = "double"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_workers < 1:
            raise ConfigurationError(f"n_workers must be >= 1, got {self.n_workers}")
        if self.per_worker_batch < 1:
            raise ConfigurationError(f"per_worker_batch must be >= 1, got {self.per_worker_batch}")
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.scheme == "C" and self.per_worker_batch % self.n_workers:
            raise ConfigurationError(
                f"scheme C needs per_worker_batch ({self.per_worker_batch}) "
                f"divisible by n_workers ({self.n_workers})"
            )
        if self.variable_batch and self.scheme == "A":
            raise ConfigurationError("variable batch size needs scheme B or C (scheme A has one FC pass)")
        T.dtype_for(self.precision)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(f"malformed cluster config: {exc}") from exc


def shard_slices(n: int, k: int) -> list[slice]:
    """Split ``range(n)`` into ``k`` contiguous blocks; the last takes the remainder."""
    base = n // k
    bounds = [i * base for i in range(k)] + [n]
    return [slice(bounds[i], bounds[i + 1]) for i in range(k)]


@dataclass
class WorkerState:
    worker_id: int
    conv_params: list[np.ndarray]
    conv_momentum: OptimizerState
    fc_shard: list[np.ndarray]
    fc_momentum: OptimizerState
    bytes_sent: Counter = field(default_factory=Counter)
    bytes_received: Counter = field(default_factory=Counter)


def _transfer(workers: list[WorkerState], src: int, dst: int, array: np.ndarray, kind: str) -> np.ndarray:
    if src == dst:
        return array
    nbytes = array.size * array.itemsize
    workers[src].bytes_sent[kind] += nbytes
    workers[dst].bytes_received[kind] += nbytes
    return array.copy()


def assembly_plan(scheme: str, n_workers: int, batch: int, step: int) -> list[tuple[int, slice]]:
    """Contributors of FC sub-batch ``step`` as ``(owner, rows of owner's batch)``, in order."""
    if scheme == "A":
        return [(w, slice(0, batch)) for w in range(n_workers)]
    if scheme == "B":
        return [(step, slice(0, batch))]
    if scheme == "C":
        if batch % n_workers:
            raise ConfigurationError(f"scheme C needs batch {batch} divisible by {n_workers}")
        m = batch // n_workers
        return [(w, slice(step * m, (step + 1) * m)) for w in range(n_workers)]
    raise ConfigurationError(f"unknown scheme {scheme!r}")


def n_fc_passes(scheme: str, n_workers: int) -> int:
    return 1 if scheme == "A" else n_workers


def exchange_activations(
    scheme: str, workers: list[WorkerState], activations: list[np.ndarray], step: int
) -> list[np.ndarray]:
    """Assemble FC sub-batch ``step`` on every worker from per-worker flattened activations."""
    if len(activations) != len(workers):
        raise UsageError(f"{len(activations)} activation tensors for {len(workers)} workers")
    plan = assembly_plan(scheme, len(workers), activations[0].shape[0], step)
    assembled = []
    for dst in range(len(workers)):
        pieces = [_transfer(workers, owner, dst, activations[owner][rows], "fc_activations") for owner, rows in plan]
        assembled.append(np.concatenate(pieces, axis=0))
    return assembled


def return_gradients(
    scheme: str, workers: list[WorkerState], step: int, partial_grads: list[np.ndarray]
) -> list[tuple[slice, np.ndarray] | None]:
    """Route FC-input gradients of sub-batch ``step`` back to the examples' owners.

    ``partial_grads[w]`` is worker ``w``'s contribution for the whole
    assembled sub-batch.  Each owner receives the rows for its examples from
    every worker and sums them in ascending worker id.  Returns, per worker,
    ``(rows of its own batch, gradient)`` or ``None`` if it owns nothing in
    this sub-batch.
    """
    n_workers = len(workers)
    n = partial_grads[0].shape[0]
    batch = n // n_workers if scheme == "A" else n
    plan = assembly_plan(scheme, n_workers, batch, step)
    out: list[tuple[slice, np.ndarray] | None] = [None] * n_workers
    start = 0
    for owner, rows in plan:
        width = rows.stop - rows.start
        sub_rows = slice(start, start + width)
        start += width
        acc = None
        for src in range(n_workers):
            piece = _transfer(workers, src, owner, partial_grads[src][sub_rows], "fc_gradients")
            acc = piece.copy() if acc is None else acc + piece
        out[owner] = (rows, acc)
    return out


def sync_conv_gradients(
    workers: list[WorkerState], local_grads: list[list[np.ndarray]], skip_broadcast: bool = False
) -> list[list[np.ndarray]]:
    """Average conv gradients across workers by shard-accumulate-broadcast.

    The flattened gradient is cut into ``K`` contiguous shards.  Worker ``i``
    collects shard ``i`` from every worker, sums in ascending worker id,
    divides by ``K`` and broadcasts the result.  ``skip_broadcast`` is a fault
    hook that omits the last phase.
    """
    n_workers = len(workers)
    shapes = [g.shape for g in local_grads[0]]
    flat = [np.concatenate([g.ravel() for g in grads]) for grads in local_grads]
    slices = shard_slices(flat[0].size, n_workers)
    reduced = []
    for owner, sl in enumerate(slices):
        acc = None
        for src in range(n_workers):
            piece = _transfer(workers, src, owner, flat[src][sl], "conv_sync")
            acc = piece.copy() if acc is None else acc + piece
        reduced.append(acc / n_workers)
    result = []
    for dst in range(n_workers):
        if skip_broadcast:
            pieces = [reduced[i] if i == dst else flat[dst][sl] for i, sl in enumerate(slices)]
        else:
            pieces = [_transfer(workers, i, dst, reduced[i], "conv_sync") for i in range(n_workers)]
        vec = np.concatenate(pieces)
        grads, offset = [], 0
        for shape in shapes:
            size = int(np.prod(shape))
            grads.append(vec[offset : offset + size].reshape(shape))
            offset += size
        result.append(grads)
    return result


@dataclass(frozen=True)
class TraceEvent:
    phase: str
    sub_batch: int | None = None
    worker: int | None = None
    bytes: int = 0


@dataclass
class StepTrace:
    """Ordered events of one step.  ``worker`` is ``None`` for phases all workers run together."""

    events: list[TraceEvent] = field(default_factory=list)

    def add(self, phase: str, sub_batch=None, worker=None, nbytes: int = 0) -> None:
        self.events.append(TraceEvent(phase, sub_batch, worker, nbytes))

    def count(self, phase: str) -> int:
        return sum(1 for e in self.events if e.phase == phase)

    def passes(self) -> list[TraceEvent]:
        return [e for e in self.events if e.phase in PASS_PHASES]


@dataclass
class StepResult:
    loss: float
    bytes: dict[str, int]
    trace: StepTrace
    max_sender_bytes: dict[str, int]


def _byte_totals(workers: list[WorkerState]) -> Counter:
    total = Counter()
    for w in workers:
        total.update(w.bytes_sent)
    return total


class Cluster:
    """K simulated workers sharing one hybrid-parallel model.

    Parameters
    ----------
    model : Model
        Initial parameters; conv params are replicated and FC params sharded.
    config : ClusterConfig
    hp : HyperParams
    fault : str, optional
        ``"skip_broadcast"`` breaks weight sync on purpose (negative control).
    """

    def __init__(self, model: Model, config: ClusterConfig, hp: HyperParams, fault: str | None = None):
        config.validate()
        if fault not in (None, "skip_broadcast"):
            raise ConfigurationError(f"unknown fault {fault!r}")
        self.spec: ModelSpec = model.spec
        self.config = config
        self.hp = hp
        self.fault = fault
        self.dtype = T.dtype_for(config.precision)
        k = config.n_workers
        self.col_slices = [shard_slices(layer.out_dim, k) for layer in self.spec.fc_layers]
        self.workers: list[WorkerState] = []
        for w in range(k):
            conv = [p.astype(self.dtype, copy=True) for p in model.conv_params]
            shard = []
            for i, cols in enumerate(self.col_slices):
                shard.append(np.array(model.fc_params[2 * i][:, cols[w]], dtype=self.dtype, order="C"))
                shard.append(np.array(model.fc_params[2 * i + 1][cols[w]], dtype=self.dtype))
            self.workers.append(
                WorkerState(w, conv, OptimizerState.zeros_like(conv), shard, OptimizerState.zeros_like(shard))
            )
        self.rng_seed = model.rng_seed
        self.steps_done = 0

    @classmethod
    def from_spec(cls, spec: ModelSpec, config: ClusterConfig, hp: HyperParams, **kwargs) -> "Cluster":
        return cls(init_model(spec, config.seed, config.precision), config, hp, **kwargs)

    @property
    def n_workers(self) -> int:
        return self.config.n_workers

    def _split(self, data, name: str) -> list[np.ndarray]:
        k, b = self.n_workers, self.config.per_worker_batch
        if isinstance(data, np.ndarray):
            if data.shape[0] != k * b:
                raise UsageError(f"{name}: expected {k * b} rows ({k} workers x {b}), got {data.shape[0]}")
            data = [data[w * b : (w + 1) * b] for w in range(k)]
        if len(data) != k or any(d.shape[0] != b for d in data):
            raise UsageError(f"{name}: expected {k} batches of {b} examples")
        return [np.asarray(d, dtype=self.dtype) for d in data]

    def _fc_pass(self, x_sub: list[np.ndarray], t_sub: np.ndarray, norm: int):
        """Forward and backward of one sub-batch through the column-sharded FC stack.

        Returns the summed (not averaged) loss, each worker's FC shard
        gradients and each worker's partial gradient for the FC input.
        """
        k = self.n_workers
        layers = self.spec.fc_layers
        last = len(layers) - 1
        xs = list(x_sub)
        inputs = [[] for _ in range(k)]
        pres = [[] for _ in range(k)]
        for i, layer in enumerate(layers):
            partial = []
            for w in range(k):
                inputs[w].append(xs[w])
                shard = self.workers[w].fc_shard
                partial.append(T.matmul(xs[w], shard[2 * i]) + shard[2 * i + 1])
            if i == last:
                break
            # all-gather of column blocks
            for w in range(k):
                z = np.concatenate(
                    [_transfer(self.workers, m, w, partial[m], "fc_internal") for m in range(k)], axis=1
                )
                pres[w].append(z)
                xs[w] = T.relu(z) if layer.relu else z

        # independent logistic units: each worker scores its own logit columns
        loss_sum = 0.0
        d_z = []
        out_cols = self.col_slices[last]
        for w in range(k):
            terms, diff = T.logistic_xent_terms(partial[w], t_sub[:, out_cols[w]])
            loss_sum += float(terms.sum())
            d_z.append(diff / norm)

        grads = [[None] * len(self.workers[w].fc_shard) for w in range(k)]
        for i in reversed(range(len(layers))):
            partial_dx = []
            for w in range(k):
                shard = self.workers[w].fc_shard
                grads[w][2 * i] = T.matmul(inputs[w][i].T, d_z[w])
                grads[w][2 * i + 1] = d_z[w].sum(axis=0)
                partial_dx.append(T.matmul(d_z[w], shard[2 * i].T))
            if i == 0:
                return loss_sum, grads, partial_dx
            # reduce-scatter onto the column blocks of the layer below
            below = self.col_slices[i - 1]
            for w in range(k):
                acc = None
                for m in range(k):
                    piece = _transfer(self.workers, m, w, partial_dx[m][:, below[w]], "fc_internal")
                    acc = piece.copy() if acc is None else acc + piece
                if layers[i - 1].relu:
                    acc = T.relu_backward(pres[w][i - 1][:, below[w]], acc)
                d_z[w] = acc

    def run_step(self, data, targets, lr: float | None = None) -> StepResult:
        """One synchronous training step over ``K`` batches of ``b`` examples.

        ``data`` and ``targets`` are either lists of per-worker batches or
        arrays of ``K * b`` rows in worker order.
        """
        cfg = self.config
        k, b = cfg.n_workers, cfg.per_worker_batch
        xs = self._split(data, "data")
        ts = self._split(targets, "targets")
        lr = self.hp.lr if lr is None else lr
        if cfg.variable_batch and self.hp.fc_lr is not None:
            fc_lr = self.hp.fc_lr * (lr / self.hp.lr) if self.hp.lr > 0 else self.hp.fc_lr
        else:
            fc_lr = lr
        before = _byte_totals(self.workers)
        sent_before = [Counter(w.bytes_sent) for w in self.workers]
        trace = StepTrace()
        max_sender = Counter()

        flats, conv_caches = [], []
        for w in range(k):
            flat, inputs, pres = conv_stack_forward(self.spec, self.workers[w].conv_params, xs[w])
            flats.append(flat)
            conv_caches.append((inputs, pres))
        trace.add("conv_fwd")

        top_grads = [np.zeros_like(f) for f in flats]
        fc_acc = None
        loss_sum = 0.0
        n_passes = n_fc_passes(cfg.scheme, k)
        for j in range(n_passes):
            mark = [w.bytes_sent["fc_activations"] for w in self.workers]
            x_sub = exchange_activations(cfg.scheme, self.workers, flats, j)
            sent = [w.bytes_sent["fc_activations"] - m for w, m in zip(self.workers, mark)]
            max_sender["fc_activations"] = max(max_sender["fc_activations"], max(sent))
            t_sub = np.concatenate([ts[owner][rows] for owner, rows in assembly_plan(cfg.scheme, k, b, j)])
            trace.add("fc_fwd", j, nbytes=sum(sent))

            part_loss, grads, partial_dx = self._fc_pass(x_sub, t_sub, norm=b)
            loss_sum += part_loss
            mark = [w.bytes_sent["fc_gradients"] for w in self.workers]
            routed = return_gradients(cfg.scheme, self.workers, j, partial_dx)
            sent = [w.bytes_sent["fc_gradients"] - m for w, m in zip(self.workers, mark)]
            max_sender["fc_gradients"] = max(max_sender["fc_gradients"], max(sent))
            trace.add("fc_bwd", j, nbytes=sum(sent))
            for w, item in enumerate(routed):
                if item is not None:
                    rows, g = item
                    top_grads[w][rows] = g

            if cfg.variable_batch:
                for w in range(k):
                    worker = self.workers[w]
                    worker.fc_momentum.step(worker.fc_shard, grads[w], fc_lr, self.hp)
                    trace.add("fc_update", j, worker=w)
            elif fc_acc is None:
                fc_acc = grads
            else:
                fc_acc = [[a + g for a, g in zip(acc_w, g_w)] for acc_w, g_w in zip(fc_acc, grads)]

        if not cfg.variable_batch:
            for w in range(k):
                worker = self.workers[w]
                mean = [g / k for g in fc_acc[w]]
                worker.fc_momentum.step(worker.fc_shard, mean, lr, self.hp)
                trace.add("fc_update", None, worker=w)

        local = []
        for w in range(k):
            inputs, pres = conv_caches[w]
            local.append(conv_stack_backward(self.spec, self.workers[w].conv_params, inputs, pres, top_grads[w]))
        trace.add("conv_bwd")

        mark = [w.bytes_sent["conv_sync"] for w in self.workers]
        synced = sync_conv_gradients(self.workers, local, skip_broadcast=self.fault == "skip_broadcast")
        sent = [w.bytes_sent["conv_sync"] - m for w, m in zip(self.workers, mark)]
        max_sender["conv_sync"] = max(sent)
        trace.add("sync", nbytes=sum(sent))

        for w in range(k):
            worker = self.workers[w]
            worker.conv_momentum.step(worker.conv_params, synced[w], lr, self.hp)
            trace.add("conv_update", None, worker=w)

        after = _byte_totals(self.workers)
        step_bytes = {kind: after[kind] - before[kind] for kind in MESSAGE_CLASSES}
        fc_internal = [w.bytes_sent["fc_internal"] - s["fc_internal"] for w, s in zip(self.workers, sent_before)]
        max_sender["fc_internal"] = max(fc_internal)
        self.steps_done += 1
        return StepResult(loss_sum / (k * b), step_bytes, trace, dict(max_sender))

    def fc_params(self) -> list[np.ndarray]:
        """Global FC parameters reassembled from the column shards."""
        out = []
        for i in range(len(self.spec.fc_layers)):
            out.append(np.concatenate([w.fc_shard[2 * i] for w in self.workers], axis=1))
            out.append(np.concatenate([w.fc_shard[2 * i + 1] for w in self.workers]))
        return out

    def replicas_consistent(self) -> bool:
        ref = self.workers[0].conv_params
        return all(
            all(np.array_equal(a, b) for a, b in zip(ref, w.conv_params)) for w in self.workers[1:]
        )

    def gather_model(self) -> Model:
        return Model(
            self.spec,
            [p.copy() for p in self.workers[0].conv_params],
            self.fc_params(),
            self.rng_seed,
        )

    def bytes_sent(self) -> list[dict[str, int]]:
        return [{kind: w.bytes_sent[kind] for kind in MESSAGE_CLASSES} for w in self.workers]
