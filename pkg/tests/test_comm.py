import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moeshard.comm import (
    AllToAll,
    ClusterConfig,
    SequentialScheduler,
    ThreadedScheduler,
    exchange_metadata,
    gather_partials,
    get_scheduler,
    group_per_expert,
    metadata_bytes,
    scatter_bytes,
    scatter_tokens,
    unpack_inbox,
)
from moeshard.engine import fused_expert_compute
from moeshard.errors import BoundsError, ConfigError, ProtocolError, ShapeError
from moeshard.expert import ExpertParams, extract_shard, make_shard_plan
from moeshard.tensor import add_into

SCHEDULERS = [SequentialScheduler, ThreadedScheduler]


def tagged_tokens(n, h, base=0.0):
    """Row t holds the sentinel value base + t in every column."""
    return (base + np.arange(n, dtype=np.float32))[:, None].repeat(h, axis=1)


class TestGrouping:
    def test_sizes(self):
        x = tagged_tokens(4, 2)
        b = group_per_expert(x, [0, 2, 0, 0], 4)
        assert b.sizes.tolist() == [3, 0, 1, 0]
        np.testing.assert_array_equal(b.buckets[0][:, 0], [0, 2, 3])
        np.testing.assert_array_equal(b.buckets[2][:, 0], [1])

    def test_single_expert_keeps_order(self):
        x = tagged_tokens(5, 3)
        b = group_per_expert(x, [1] * 5, 3)
        np.testing.assert_array_equal(b.buckets[1], x)
        np.testing.assert_array_equal(b.original_index, np.arange(5))

    @given(st.lists(st.integers(0, 5), max_size=40))
    def test_ungroup_inverts(self, m):
        x = tagged_tokens(len(m), 2)
        b = group_per_expert(x, m, 6)
        np.testing.assert_array_equal(b.ungroup(b.concatenated()), x)
        assert sorted(b.original_index.tolist()) == list(range(len(m)))

    def test_out_of_range(self):
        with pytest.raises(BoundsError):
            group_per_expert(tagged_tokens(2, 2), [0, 4], 4)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            group_per_expert(tagged_tokens(2, 2), [0], 4)


class TestMetadata:
    def test_broadcast(self):
        tables = exchange_metadata([np.array([3, 0, 1, 0]), np.array([0, 2, 0, 0])])
        for t in tables:
            np.testing.assert_array_equal(t, [[3, 0, 1, 0], [0, 2, 0, 0]])

    def test_single_device(self):
        [t] = exchange_metadata([np.array([1, 2])])
        np.testing.assert_array_equal(t, [[1, 2]])

    def test_column_sums_match_raw_assignment(self):
        rng = np.random.default_rng(0)
        assignments = [rng.integers(0, 5, size=n) for n in (10, 3, 7)]
        sizes = [group_per_expert(tagged_tokens(len(a), 1), a, 5).sizes for a in assignments]
        table = exchange_metadata(sizes)[0]
        np.testing.assert_array_equal(table.sum(axis=0), np.bincount(np.concatenate(assignments), minlength=5))

    def test_missing_contribution(self):
        with pytest.raises(ProtocolError):
            exchange_metadata([])
        with pytest.raises(ProtocolError):
            exchange_metadata([np.array([1, 2]), np.array([1])])

    def test_bytes(self):
        assert metadata_bytes(128, 4) == 3 * 128 * 8
        assert metadata_bytes(8, 1) == 0


class TestScatterGather:
    def test_full_batch_payload(self):
        assert scatter_bytes(250 * 120, 768, 2) == 92_160_000
        assert 92_160_000 / 2**20 == pytest.approx(87.89, abs=0.01)
        assert scatter_bytes(250 * 120, 768, 4) == 3 * 92_160_000

    def test_single_device_scatter_is_local(self):
        b = group_per_expert(tagged_tokens(4, 2), [1, 0, 1, 1], 2)
        [inbox] = scatter_tokens([b], exchange_metadata([b.sizes])[0])
        for e in range(2):
            np.testing.assert_array_equal(inbox[0][e], b.buckets[e])
        assert scatter_bytes(4, 2, 1) == 0

    def test_inbox_shapes_and_conservation(self):
        rng = np.random.default_rng(1)
        ns = [5, 0, 9]
        xs = [tagged_tokens(n, 3, base=100 * g) for g, n in enumerate(ns)]
        buckets = [group_per_expert(x, rng.integers(0, 4, len(x)), 4) for x in xs]
        table = exchange_metadata([b.sizes for b in buckets])[0]
        inboxes = scatter_tokens(buckets, table)
        for inbox in inboxes:
            np.testing.assert_array_equal(inbox.sizes(), table)
            assert inbox.sizes().sum() == sum(ns)
            for g in range(3):
                for e in range(4):
                    np.testing.assert_array_equal(inbox[g][e], buckets[g].buckets[e])

    def test_wrong_row_count_is_protocol_error(self):
        with pytest.raises(ProtocolError):
            unpack_inbox([np.zeros((3, 2))], np.array([[1, 1]]))

    def test_identity_round_trip(self):
        G, E, h = 2, 3, 4
        eye = np.eye(h, dtype=np.float32)
        experts = [ExpertParams(e, eye, eye) for e in range(E)]
        plan = make_shard_plan(h, G)
        rng = np.random.default_rng(2)
        xs = [np.abs(rng.standard_normal((n, h))).astype(np.float32) for n in (6, 4)]
        buckets = [group_per_expert(x, rng.integers(0, E, len(x)), E) for x in xs]
        table = exchange_metadata([b.sizes for b in buckets])[0]
        inboxes = scatter_tokens(buckets, table)
        processed = [
            fused_expert_compute(inboxes[p], [extract_shard(e, plan, p) for e in experts], "per_gpu_per_expert")[0]
            for p in range(G)
        ]
        y = gather_partials(processed)
        for g in range(G):
            total = y[g][0]
            for part in y[g][1:]:
                total = add_into(total, part)
            np.testing.assert_array_equal(total, buckets[g].concatenated())

    def test_gather_layout_check(self):
        b = group_per_expert(tagged_tokens(2, 1), [0, 0], 1)
        inboxes = scatter_tokens([b, b], exchange_metadata([b.sizes, b.sizes])[0])
        with pytest.raises(ProtocolError):
            gather_partials(inboxes[:1])


def echo_program(rank, n, rounds):
    got = []
    for r in range(rounds):
        reply = yield AllToAll(f"step{r}", [(rank, dst, r) for dst in range(n)])
        got.append(reply)
    return got


@pytest.mark.parametrize("Scheduler", SCHEDULERS)
class TestSchedulers:
    def test_messages_arrive_by_source(self, Scheduler):
        n = 3
        results = Scheduler().run([echo_program(g, n, 2) for g in range(n)])
        for rank, got in enumerate(results):
            assert got == [[(src, rank, r) for src in range(n)] for r in range(2)]

    def test_payloads_are_read_only(self, Scheduler):
        def prog(rank):
            reply = yield AllToAll("x", [np.zeros(2), np.zeros(2)])
            try:
                reply[0][0] = 1.0
            except ValueError:
                return "frozen"
            return "mutable"

        assert Scheduler().run([prog(0), prog(1)]) == ["frozen", "frozen"]

    def test_early_finish_is_protocol_error(self, Scheduler):
        with pytest.raises(ProtocolError):
            Scheduler(**({"timeout": 5} if Scheduler is ThreadedScheduler else {})).run(
                [echo_program(0, 2, 1), echo_program(1, 2, 2)]
            )

    def test_phase_mismatch(self, Scheduler):
        def prog(rank):
            yield AllToAll("a" if rank == 0 else "b", [None, None])

        with pytest.raises(ProtocolError):
            Scheduler().run([prog(0), prog(1)])

    def test_wrong_payload_count(self, Scheduler):
        def prog(rank):
            yield AllToAll("a", [None])

        with pytest.raises(ProtocolError):
            Scheduler().run([prog(0), prog(1)])

    def test_errors_propagate(self, Scheduler):
        def prog(rank):
            yield AllToAll("a", [None, None])
            if rank == 1:
                raise RuntimeError("boom")
            yield AllToAll("b", [None, None])

        with pytest.raises((RuntimeError, ProtocolError)):
            Scheduler().run([prog(0), prog(1)])


def test_get_scheduler():
    assert isinstance(get_scheduler(None), SequentialScheduler)
    assert isinstance(get_scheduler("threaded"), ThreadedScheduler)
    with pytest.raises(ConfigError):
        get_scheduler("async")


def test_cluster_config():
    assert ClusterConfig(4).bytes_per_element == 4
    with pytest.raises(ConfigError):
        ClusterConfig(0)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**31))
def test_threaded_matches_sequential(n, rounds, seed):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n, n, 3))

    def prog(rank):
        acc = []
        for r in range(rounds):
            reply = yield AllToAll(f"r{r}", [data[rank, dst] * (r + 1) for dst in range(n)])
            acc.append(np.stack(reply))
        return np.stack(acc)

    a = SequentialScheduler().run([prog(g) for g in range(n)])
    b = ThreadedScheduler().run([prog(g) for g in range(n)])
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()
