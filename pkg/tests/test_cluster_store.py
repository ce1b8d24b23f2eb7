import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvtier.cluster_store import (Appended, Cluster, Deferred, KvEntry, Origin, Partition,
                                  SplitNow, calibrate_thresholds, init_partition, kmeans,
                                  load_snapshot, nearest_rank_percentile, split_cluster)
from kvtier.vector_stats import batch_stats, variance


def entries_from(keys, start=0, origin=Origin.PREFILL):
    return [KvEntry(start + i, np.asarray(k, float), np.zeros(2), origin)
            for i, k in enumerate(keys)]


def two_blobs(rng, n=40, dim=4, gap=10.0):
    a = rng.standard_normal((n, dim)) * 0.1
    b = rng.standard_normal((n, dim)) * 0.1 + gap
    return np.concatenate([a, b])


# -- clustering primitives -------------------------------------------------

def test_kmeans_separates_blobs(rng):
    pts = two_blobs(rng)
    labels = kmeans(pts, 2, seed=3)
    assert len(set(labels[:40])) == 1 and len(set(labels[40:])) == 1
    assert labels[0] != labels[40]


def test_kmeans_every_cluster_nonempty(rng):
    pts = np.zeros((10, 3))
    pts[0] = 1.0
    labels = kmeans(pts, 4, seed=0)
    assert sorted(set(labels.tolist())) == [0, 1, 2, 3]


def test_kmeans_bad_k():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 4)


def test_kmeans_deterministic(rng):
    pts = rng.standard_normal((200, 8))
    np.testing.assert_array_equal(kmeans(pts, 6, seed=9), kmeans(pts, 6, seed=9))


def test_init_partition_is_exact_partition(rng):
    es = entries_from(rng.standard_normal((120, 6)))
    p = init_partition(es, 7, seed=1)
    assert len(p) == 7
    ids = sorted(i for c in p.clusters.values() for i in c.members)
    assert ids == list(range(120))
    p.check_conservation()
    # representative rows follow ascending cid order
    assert p.rep_cids == sorted(p.clusters)
    for cid, c in p.clusters.items():
        np.testing.assert_allclose(p.representative(cid), c.stats.centroid)


def test_init_partition_rejects_too_many_clusters(rng):
    with pytest.raises(ValueError):
        init_partition(entries_from(rng.standard_normal((3, 2))), 4)


def test_split_cluster_separates_blobs(rng):
    pts = two_blobs(rng, n=10)
    es = entries_from(pts)
    lookup = {e.id: e.key for e in es}.__getitem__
    parent = Cluster(0, [e.id for e in es], batch_stats(pts))
    kept, other, ev = split_cluster(parent, [], lookup, new_cid=5)
    assert {tuple(sorted(kept.members)), tuple(sorted(other.members))} == {
        tuple(range(10)), tuple(range(10, 20))}
    assert kept.cid == 0 and other.cid == 5
    assert ev.kept == tuple(kept.members) and ev.moved == tuple(other.members)


def test_split_kept_child_is_nearest_parent_centroid(rng):
    # 30 points near 0, 5 points near 10: the parent centroid sits near the big blob
    pts = np.concatenate([rng.standard_normal((30, 2)) * 0.1,
                          rng.standard_normal((5, 2)) * 0.1 + 10])
    es = entries_from(pts)
    parent = Cluster(0, list(range(35)), batch_stats(pts))
    kept, other, _ = split_cluster(parent, [], lambda i: pts[i], new_cid=1)
    assert set(kept.members) == set(range(30))


def test_split_includes_extra_entries(rng):
    pts = rng.standard_normal((6, 3))
    parent = Cluster(2, list(range(6)), batch_stats(pts))
    extra = entries_from([np.full(3, 50.0)], start=100)
    kept, other, ev = split_cluster(parent, extra, lambda i: pts[i], new_cid=9)
    assert sorted(kept.members + other.members) == list(range(6)) + [100]
    assert ev.buffered == (100,)
    assert other.members == [100]


def test_split_needs_two_points():
    parent = Cluster(0, [0], batch_stats([[1.0, 2.0]]))
    with pytest.raises(ValueError):
        split_cluster(parent, [], lambda i: np.array([1.0, 2.0]), new_cid=1)


def test_split_identical_points_has_nonempty_children():
    pts = np.ones((4, 2))
    parent = Cluster(0, list(range(4)), batch_stats(pts))
    kept, other, _ = split_cluster(parent, [], lambda i: pts[i], new_cid=1)
    assert kept.members and other.members


# -- thresholds --------------------------------------------------------------

def test_nearest_rank_percentile():
    assert nearest_rank_percentile(range(1, 11), 90) == 9
    assert nearest_rank_percentile([5.0], 90) == 5.0
    assert nearest_rank_percentile([3, 1, 2], 100) == 3
    with pytest.raises(ValueError):
        nearest_rank_percentile([], 90)


def test_calibrate_thresholds_is_alpha_times_p90(rng):
    es = entries_from(rng.standard_normal((300, 4)))
    p = init_partition(es, 10, seed=0)
    vs = sorted(variance(c.stats) for c in p.clusters.values())
    tau = calibrate_thresholds({"h0": p}, alpha=2.0)["h0"]
    assert tau == pytest.approx(2.0 * vs[8])


# -- ingest / deferral ---------------------------------------------------------

def blob_partition(rng, threshold):
    es = entries_from(two_blobs(rng, n=20, dim=2))
    return init_partition(es, 2, seed=0, threshold=threshold, buffer_budget=3)


def test_ingest_append_within_threshold(rng):
    p = blob_partition(rng, threshold=1.0)
    cid = p.assign_entry(np.zeros(2))
    out = p.ingest(KvEntry(1000, np.zeros(2), np.zeros(2)), active=set())
    assert out == Appended(cid)
    assert 1000 in p.clusters[cid].members


def test_ingest_splits_when_active(rng):
    p = blob_partition(rng, threshold=0.05)
    far = np.array([3.0, 3.0])
    cid = p.assign_entry(far)
    out = p.ingest(KvEntry(1000, far, np.zeros(2)), active={cid})
    assert isinstance(out, SplitNow) and out.cid == cid
    assert len(p) == 3
    p.check_conservation()


def test_ingest_defers_when_not_active(rng):
    p = blob_partition(rng, threshold=0.05)
    far = np.array([3.0, 3.0])
    cid = p.assign_entry(far)
    out = p.ingest(KvEntry(1000, far, np.zeros(2)), active=set())
    assert out == Deferred(cid)
    assert p.clusters[cid].split_flag
    assert p.buffered_total == 1
    assert 1000 in p.covered_ids(cid)
    assert 1000 not in p.clusters[cid].members
    p.check_conservation()
    # flushing with the cluster loaded performs the split and empties the buffer
    events = p.flush_deferred({cid})
    assert len(events) == 1 and events[0].reason == "deferred"
    assert p.buffered_total == 0 and len(p) == 3
    p.check_conservation()


def test_flush_ignores_unflagged_and_unknown(rng):
    p = blob_partition(rng, threshold=math.inf)
    assert p.flush_deferred({0, 1, 99}) == []


def test_enforce_budget_picks_largest_buffer(rng):
    p = blob_partition(rng, threshold=0.01)
    a = p.assign_entry(np.zeros(2))
    b = p.assign_entry(np.full(2, 10.0))
    p.ingest(KvEntry(1000, np.array([0.5, 0.5]), np.zeros(2)), set())
    p.ingest(KvEntry(1001, np.array([10.5, 10.5]), np.zeros(2)), set())
    assert p.enforce_buffer_budget() is None  # 2 < 3
    p.ingest(KvEntry(1002, np.array([10.6, 10.4]), np.zeros(2)), set())
    forced = p.enforce_buffer_budget()
    assert forced is not None and forced.cid == b
    assert forced.n_buffered == 2
    assert p.buffered_total == 1 and p.clusters[a].split_flag
    p.check_conservation()


def test_enforce_budget_tie_goes_to_lowest_cid(rng):
    p = blob_partition(rng, threshold=0.01)
    p.buffer_budget = 2
    p.ingest(KvEntry(1000, np.array([0.5, 0.5]), np.zeros(2)), set())
    p.ingest(KvEntry(1001, np.array([10.5, 10.5]), np.zeros(2)), set())
    forced = p.enforce_buffer_budget()
    assert forced.cid == min(p.assign_entry(np.zeros(2)), p.assign_entry(np.full(2, 10.0)))


def test_zero_budget_forces_every_deferral(rng):
    p = blob_partition(rng, threshold=0.01)
    p.buffer_budget = 0
    assert p.enforce_buffer_budget() is None
    p.ingest(KvEntry(1000, np.array([0.5, 0.5]), np.zeros(2)), set())
    assert p.enforce_buffer_budget() is not None
    assert p.buffered_total == 0


def test_infinite_threshold_never_changes_count(rng):
    p = blob_partition(rng, threshold=math.inf)
    for i in range(200):
        out = p.ingest(KvEntry(1000 + i, rng.standard_normal(2) * 20, np.zeros(2)), set())
        assert isinstance(out, Appended)
    assert len(p) == 2


def test_duplicate_ids_rejected(rng):
    p = blob_partition(rng, threshold=math.inf)
    with pytest.raises(ValueError):
        p.ingest(KvEntry(0, np.zeros(2), np.zeros(2)), set())
    with pytest.raises(ValueError):
        p.add_cluster(entries_from([[0.0, 0.0]], start=3))


def test_assign_into_empty_partition():
    with pytest.raises(ValueError):
        Partition(2).assign_entry(np.zeros(2))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 6), st.floats(0.01, 2.0))
def test_conservation_property(seed, budget, threshold):
    rng = np.random.default_rng(seed)
    es = entries_from(rng.standard_normal((40, 3)))
    p = init_partition(es, 4, seed=seed, threshold=threshold, buffer_budget=budget)
    for t in range(120):
        e = KvEntry(100 + t, rng.standard_normal(3) * 2, np.zeros(2), Origin.DECODE)
        active = set(rng.choice(sorted(p.clusters), size=min(2, len(p)), replace=False).tolist())
        p.ingest(e, active)
        p.flush_deferred(active)
        while p.enforce_buffer_budget() is not None:
            pass
        p.check_conservation()
        assert p.buffered_total < max(budget, 1)
        assert p.rep_cids == sorted(p.clusters)


# -- snapshots -------------------------------------------------------------------

def test_snapshot_round_trip(rng):
    p = blob_partition(rng, threshold=0.05)
    p.ingest(KvEntry(1000, np.array([3.0, 3.0]), np.ones(2), Origin.DECODE), set())
    blob = p.to_bytes()
    q = Partition.from_bytes(blob)
    assert q.to_bytes() == blob
    assert q.membership() == p.membership()
    assert q.buffered_total == p.buffered_total == 1
    assert q.threshold == p.threshold and q.next_cid == p.next_cid
    np.testing.assert_array_equal(q.representatives, p.representatives)
    q.check_conservation()


def test_snapshot_rejects_garbage(rng):
    blob = blob_partition(rng, threshold=1.0).to_bytes()
    with pytest.raises(ValueError):
        load_snapshot(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        load_snapshot(blob + b"\0")
