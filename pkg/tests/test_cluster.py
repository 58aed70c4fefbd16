import numpy as np
import pytest

from hpsim.cluster import (
    Cluster,
    ClusterConfig,
    WorkerState,
    assembly_plan,
    exchange_activations,
    n_fc_passes,
    return_gradients,
    shard_slices,
    sync_conv_gradients,
)
from hpsim.exceptions import ConfigurationError, UsageError
from hpsim.model import init_model
from hpsim.optimizer import HyperParams, OptimizerState
from hpsim.reference import SingleWorkerSGD, max_relative_divergence


def make_workers(k):
    return [WorkerState(w, [], OptimizerState([]), [], OptimizerState([])) for w in range(k)]


def tagged_activations(k, b, dim=1):
    """Row ``r`` of worker ``w`` is filled with ``1000*w + r``."""
    return [np.full((b, dim), 0.0) + (1000.0 * w + np.arange(b))[:, None] for w in range(k)]


class TestConfig:
    def test_scheme_c_needs_divisible_batch(self):
        with pytest.raises(ConfigurationError, match="divisible"):
            ClusterConfig(n_workers=3, per_worker_batch=8, scheme="C")

    def test_variable_batch_excludes_scheme_a(self):
        with pytest.raises(ConfigurationError):
            ClusterConfig(scheme="A", variable_batch=True)

    @pytest.mark.parametrize("field,value", [("n_workers", 0), ("per_worker_batch", 0), ("scheme", "D")])
    def test_bad_values(self, field, value):
        with pytest.raises(ConfigurationError):
            ClusterConfig(**{field: value})


class TestSharding:
    @pytest.mark.parametrize("n,k", [(10, 3), (4096, 8), (5, 5), (7, 1)])
    def test_union_is_disjoint_cover(self, n, k):
        slices = shard_slices(n, k)
        idx = np.concatenate([np.arange(n)[s] for s in slices])
        assert np.array_equal(idx, np.arange(n))

    def test_last_shard_absorbs_remainder(self):
        assert [s.stop - s.start for s in shard_slices(10, 3)] == [3, 3, 4]

    def test_pass_counts(self):
        assert [n_fc_passes(s, 4) for s in "ABC"] == [1, 4, 4]


class TestExchange:
    @pytest.mark.parametrize("scheme,expected", [("A", 384 * 8), ("B", 384 * 8), ("C", 96 * 8)])
    def test_max_sender_bytes_per_exchange(self, scheme, expected):
        k, b = 4, 128
        workers = make_workers(k)
        exchange_activations(scheme, workers, tagged_activations(k, b), 0)
        assert max(w.bytes_sent["fc_activations"] for w in workers) == expected

    @pytest.mark.parametrize("scheme", "ABC")
    def test_bytes_conserved(self, scheme):
        k = 4
        workers = make_workers(k)
        acts = tagged_activations(k, 8, dim=3)
        for j in range(n_fc_passes(scheme, k)):
            exchange_activations(scheme, workers, acts, j)
        sent = sum(w.bytes_sent["fc_activations"] for w in workers)
        received = sum(w.bytes_received["fc_activations"] for w in workers)
        assert sent == received > 0

    def test_scheme_c_ordering(self):
        k, b = 3, 6
        out = exchange_activations("C", make_workers(k), tagged_activations(k, b), 1)
        expected = [2, 3, 1002, 1003, 2002, 2003]
        for got in out:
            assert got[:, 0].tolist() == expected

    def test_scheme_b_turn_taking(self):
        k, b = 3, 2
        acts = tagged_activations(k, b)
        for j in range(k):
            out = exchange_activations("B", make_workers(k), acts, j)
            assert all(np.array_equal(o, acts[j]) for o in out)

    def test_scheme_c_inbound_equals_outbound(self):
        k = 3
        workers = make_workers(k)
        acts = tagged_activations(k, 9, dim=2)
        for j in range(k):
            exchange_activations("C", workers, acts, j)
        for w in workers:
            assert w.bytes_sent["fc_activations"] == w.bytes_received["fc_activations"]

    @pytest.mark.parametrize("scheme", "ABC")
    def test_every_example_assembled_once(self, scheme):
        k, b = 4, 8
        acts = tagged_activations(k, b)
        seen = np.concatenate(
            [exchange_activations(scheme, make_workers(k), acts, j)[0] for j in range(n_fc_passes(scheme, k))]
        )
        assert sorted(seen[:, 0]) == sorted(np.concatenate(acts)[:, 0])

    def test_wrong_worker_count(self):
        with pytest.raises(UsageError):
            exchange_activations("B", make_workers(2), tagged_activations(3, 2), 0)


class TestReturnGradients:
    @pytest.mark.parametrize("scheme", "ABC")
    def test_round_trip_restores_owner_rows(self, scheme):
        # partial sums: only one worker contributes non-zero values, so the
        # owner-side sum must reproduce them exactly
        k, b = 4, 8
        acts = tagged_activations(k, b, dim=2)
        workers = make_workers(k)
        recovered = [np.zeros_like(a) for a in acts]
        for j in range(n_fc_passes(scheme, k)):
            assembled = exchange_activations(scheme, workers, acts, j)
            partial = [assembled[0] if w == 0 else np.zeros_like(assembled[w]) for w in range(k)]
            for w, item in enumerate(return_gradients(scheme, workers, j, partial)):
                if item is not None:
                    rows, g = item
                    recovered[w][rows] = g
        assert all(np.array_equal(r, a) for r, a in zip(recovered, acts))

    def test_partials_summed(self):
        k, b = 2, 2
        workers = make_workers(k)
        partial = [np.ones((b, 1)), 2 * np.ones((b, 1))]
        out = return_gradients("B", workers, 1, partial)
        assert out[0] is None
        rows, g = out[1]
        assert rows == slice(0, 2) and np.array_equal(g, 3 * np.ones((b, 1)))


class TestSync:
    def test_two_worker_mean(self):
        workers = make_workers(2)
        out = sync_conv_gradients(workers, [[np.array([1.0, 2.0])], [np.array([3.0, 4.0])]])
        assert all(np.array_equal(o[0], [2.0, 3.0]) for o in out)

    def test_per_worker_bytes(self):
        k, n = 5, 125  # G = 1000 bytes
        workers = make_workers(k)
        sync_conv_gradients(workers, [[np.full(n, float(w))] for w in range(k)])
        assert [w.bytes_sent["conv_sync"] for w in workers] == [2 * (k - 1) * 1000 // k] * k

    def test_single_worker_is_no_op(self):
        workers = make_workers(1)
        g = np.arange(6.0).reshape(2, 3)
        (out,) = sync_conv_gradients(workers, [[g]])
        assert np.array_equal(out[0], g)
        assert not workers[0].bytes_sent

    def test_shapes_restored(self, rng):
        workers = make_workers(3)
        grads = [[rng.standard_normal((2, 3, 3)), rng.standard_normal(2)] for _ in range(3)]
        out = sync_conv_gradients(workers, grads)
        assert [g.shape for g in out[2]] == [(2, 3, 3), (2,)]

    def test_skip_broadcast_leaves_replicas_inconsistent(self, rng):
        workers = make_workers(2)
        grads = [[rng.standard_normal(4)] for _ in range(2)]
        out = sync_conv_gradients(workers, grads, skip_broadcast=True)
        assert not np.array_equal(out[0][0], out[1][0])


def batch(spec, k, b, seed=0):
    r = np.random.default_rng(seed)
    x = r.standard_normal((k * b, *spec.input_shape))
    t = np.zeros((k * b, spec.num_classes))
    t[np.arange(k * b), r.integers(0, spec.num_classes, k * b)] = 1.0
    return x, t


class TestClusterStep:
    @pytest.mark.parametrize("scheme", "ABC")
    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_matches_single_worker(self, deep_spec, scheme, k):
        hp = HyperParams(lr=0.1)
        model = init_model(deep_spec, 3, std=0.2)
        cluster = Cluster(model, ClusterConfig(k, 4, scheme), hp)
        oracle = SingleWorkerSGD(model, hp)
        for s in range(3):
            x, t = batch(deep_spec, k, 4, seed=s)
            loss = cluster.run_step(x, t)
            assert loss.loss == pytest.approx(oracle.step(x, t), rel=1e-12)
        assert max_relative_divergence(cluster.gather_model().params, oracle.model.params) < 1e-12
        assert cluster.replicas_consistent()

    def test_original_model_untouched(self, toy):
        model = init_model(toy, 0)
        before = [p.copy() for p in model.params]
        Cluster(model, ClusterConfig(1, 4, "B"), HyperParams(lr=0.5)).run_step(*batch(toy, 1, 4))
        assert all(np.array_equal(a, b) for a, b in zip(before, model.params))

    def test_schemes_b_and_c_agree(self, toy):
        x, t = batch(toy, 4, 8)
        out = []
        for scheme in "BC":
            cluster = Cluster(init_model(toy, 0), ClusterConfig(4, 8, scheme), HyperParams(lr=0.2))
            cluster.run_step(x, t)
            out.append(cluster.gather_model().params)
        assert max_relative_divergence(out[0], out[1]) < 1e-10

    @pytest.mark.parametrize("k", [2, 4])
    def test_byte_identities(self, deep_spec, k):
        b = 4
        cluster = Cluster.from_spec(deep_spec, ClusterConfig(k, b, "C"), HyperParams())
        res = cluster.run_step(*batch(deep_spec, k, b))
        act_bytes = deep_spec.flat_dim * 8
        assert res.max_sender_bytes["fc_activations"] == (k - 1) * (b // k) * act_bytes
        # gradients mirror activations
        assert res.bytes["fc_gradients"] == res.bytes["fc_activations"]
        g_bytes = sum(p.size for p in cluster.workers[0].conv_params) * 8
        assert res.bytes["conv_sync"] == k * 2 * (k - 1) * g_bytes // k
        assert res.bytes["fc_internal"] > 0

    def test_trace_structure(self, toy):
        cluster = Cluster.from_spec(toy, ClusterConfig(2, 4, "B"), HyperParams())
        trace = cluster.run_step(*batch(toy, 2, 4)).trace
        phases = [e.phase for e in trace.passes()]
        assert phases == ["conv_fwd", "fc_fwd", "fc_bwd", "fc_fwd", "fc_bwd", "conv_bwd"]
        assert trace.count("fc_update") == 2 and trace.count("sync") == 1

    def test_wrong_batch_rows(self, toy):
        cluster = Cluster.from_spec(toy, ClusterConfig(2, 4, "B"), HyperParams())
        x, t = batch(toy, 2, 3)
        with pytest.raises(UsageError, match="expected 8 rows"):
            cluster.run_step(x, t)

    def test_assembly_plan_c(self):
        assert assembly_plan("C", 2, 4, 1) == [(0, slice(2, 4)), (1, slice(2, 4))]

    def test_unknown_fault(self, toy):
        with pytest.raises(ConfigurationError):
            Cluster.from_spec(toy, ClusterConfig(2, 4), HyperParams(), fault="drop")
