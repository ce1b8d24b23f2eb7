"""Adaptive per-(layer, head) cluster partition.

New keys go to their nearest cluster. A cluster whose variance would exceed
the head threshold is split at once when it is resident in memory (part of
the active set); otherwise the key waits in the cluster's buffer and the
split runs when the cluster is next loaded, or when the total number of
buffered keys reaches the buffer budget.
"""

import math
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _kernels
from .vector_stats import ClusterStats, batch_stats, update_stats, variance

__all__ = [
    "Origin",
    "KvEntry",
    "Cluster",
    "Appended",
    "SplitNow",
    "Deferred",
    "SplitEvent",
    "ForcedLoad",
    "Partition",
    "kmeans",
    "init_partition",
    "split_cluster",
    "calibrate_thresholds",
    "nearest_rank_percentile",
    "SNAPSHOT_MAGIC",
    "SNAPSHOT_VERSION",
]

SPLIT_MAX_ITER = 10
DEFAULT_BUFFER_BUDGET = 16


class Origin(Enum):
    PREFILL = 0
    DECODE = 1


@dataclass(frozen=True, eq=False)
class KvEntry:
    id: int
    key: np.ndarray
    value: np.ndarray
    origin: Origin = Origin.DECODE


@dataclass(eq=False)
class Cluster:
    cid: int
    members: list
    stats: ClusterStats
    buffer: list = field(default_factory=list)
    split_flag: bool = False

    @property
    def size(self):
        return len(self.members)


@dataclass(frozen=True)
class Appended:
    cid: int


@dataclass(frozen=True)
class SplitNow:
    cid: int
    new_cid: int
    event: "SplitEvent" = None


@dataclass(frozen=True)
class Deferred:
    cid: int


@dataclass(frozen=True)
class SplitEvent:
    """One executed split. ``cid`` keeps its id; ``new_cid`` is fresh.

    ``buffered`` lists the ids that were waiting in memory (deferred keys
    and, for an immediate split, the triggering key) and so have never been
    written to flash.
    """

    cid: int
    new_cid: int
    kept: tuple
    moved: tuple
    buffered: tuple
    reason: str


@dataclass(frozen=True)
class ForcedLoad:
    cid: int
    n_members: int
    n_buffered: int
    split: SplitEvent


# ---------------------------------------------------------------------------
# clustering primitives
# ---------------------------------------------------------------------------

def _kmeanspp(points, k, rng):
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centers[0] = points[first]
    _, d2 = _kernels.assign_rows(points, centers[:1])
    for c in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[c] = points[idx]
        _, nd = _kernels.assign_rows(points, centers[c:c + 1])
        np.minimum(d2, nd, out=d2)
    return centers


def _lloyd(points, centers, max_iter):
    k = centers.shape[0]
    labels = None
    for _ in range(max_iter):
        new_labels, d2 = _kernels.assign_rows(points, centers)
        counts = np.bincount(new_labels, minlength=k)
        # refill empty clusters with the worst-fit point, deterministically
        for c in np.flatnonzero(counts == 0):
            # only take from clusters that keep at least one point
            far = int(np.argmax(np.where(counts[new_labels] > 1, d2, -1.0)))
            counts[new_labels[far]] -= 1
            new_labels[far] = c
            counts[c] = 1
            d2[far] = 0.0
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            centers[c] = points[labels == c].mean(axis=0)
    inertia = float(sum(((points[labels == c] - centers[c]) ** 2).sum() for c in range(k)))
    return labels, inertia


def kmeans(points, k, seed=0, n_init=4, max_iter=100):
    """Seeded k-means++ / Lloyd. Returns labels with every cluster non-empty."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    if k == n:
        return np.arange(n, dtype=np.int64)
    rng = np.random.default_rng(seed)
    best_labels, best_inertia = None, math.inf
    for _ in range(n_init):
        centers = _kmeanspp(points, k, rng)
        labels, inertia = _lloyd(points, centers, max_iter)
        if inertia < best_inertia:
            best_labels, best_inertia = labels, inertia
    return best_labels


def _canonical_groups(labels, k):
    """Group positions by label, ordered by each group's first position."""
    groups = [[] for _ in range(k)]
    for pos, lab in enumerate(labels):
        groups[int(lab)].append(pos)
    groups.sort(key=lambda g: g[0])
    return groups


def split_cluster(c, extra, key_lookup, new_cid, reason="immediate"):
    """Bisect ``c`` (members plus ``extra`` entries) with 2-means.

    Farthest-pair initialisation, at most ``SPLIT_MAX_ITER`` Lloyd rounds.
    The child whose centroid lies closer to the parent centroid keeps
    ``c.cid``; the other gets ``new_cid``. Returns ``(kept, other, event)``.
    """
    ids = list(c.members) + [e.id for e in extra]
    if len(ids) < 2:
        raise ValueError("split needs at least two points")
    keys = [key_lookup(i) for i in c.members] + [e.key for e in extra]
    pts = np.ascontiguousarray(np.stack(keys), dtype=np.float64)

    i, j = _kernels.farthest_pair(pts)
    centers = np.stack([pts[i], pts[j]])
    labels = None
    for _ in range(SPLIT_MAX_ITER):
        new_labels, _ = _kernels.assign_rows(pts, centers)
        new_labels = _fix_empty_side(pts, new_labels, centers)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centers = np.stack([pts[labels == 0].mean(axis=0), pts[labels == 1].mean(axis=0)])

    side_a = np.flatnonzero(labels == 0)
    side_b = np.flatnonzero(labels == 1)
    stats_a = batch_stats(pts[side_a])
    stats_b = batch_stats(pts[side_b])

    ref = c.stats.centroid if c.stats.n else pts.mean(axis=0)
    da = float(((stats_a.centroid - ref) ** 2).sum())
    db = float(((stats_b.centroid - ref) ** 2).sum())
    if db < da or (db == da and side_b[0] < side_a[0]):
        side_a, side_b = side_b, side_a
        stats_a, stats_b = stats_b, stats_a

    kept = Cluster(c.cid, [ids[p] for p in side_a], stats_a)
    other = Cluster(new_cid, [ids[p] for p in side_b], stats_b)
    event = SplitEvent(
        cid=c.cid,
        new_cid=new_cid,
        kept=tuple(kept.members),
        moved=tuple(other.members),
        buffered=tuple(e.id for e in extra),
        reason=reason,
    )
    return kept, other, event


def _fix_empty_side(pts, labels, centers):
    for empty in (0, 1):
        if not np.any(labels == empty):
            donor = np.flatnonzero(labels != empty)
            d = ((pts[donor] - centers[empty]) ** 2).sum(axis=1)
            labels = labels.copy()
            labels[donor[int(np.argmin(d))]] = empty
    return labels


def nearest_rank_percentile(values, pct):
    v = sorted(values)
    if not v:
        raise ValueError("percentile of an empty list")
    rank = max(1, math.ceil(pct / 100.0 * len(v)))
    return v[rank - 1]


def calibrate_thresholds(initial, alpha=1.5, pct=90.0):
    """Per-head threshold: ``alpha`` times the 90th-percentile initial variance.

    ``initial`` maps a head key to its prefill ``Partition``.
    """
    out = {}
    for head, p in initial.items():
        if not p.clusters:
            raise ValueError(f"empty initial partition for head {head!r}")
        out[head] = alpha * nearest_rank_percentile(
            [variance(c.stats) for c in p.clusters.values()], pct)
    return out


# ---------------------------------------------------------------------------
# partition
# ---------------------------------------------------------------------------

class Partition:
    """All clusters of one (layer, head) stream plus its representative table."""

    def __init__(self, dim, threshold=math.inf, buffer_budget=DEFAULT_BUFFER_BUDGET,
                 head_id=0, layer_id=0):
        self.dim = int(dim)
        self.threshold = float(threshold)
        self.buffer_budget = int(buffer_budget)
        self.head_id = head_id
        self.layer_id = layer_id
        self.clusters = {}
        self.entries = {}
        self.next_cid = 0
        self._rows = {}
        self._row_cids = []
        self._reps = np.empty((16, self.dim))
        self._buffered_total = 0

    # -- representatives ---------------------------------------------------

    def _set_rep(self, cid, vec):
        row = self._rows.get(cid)
        if row is None:
            row = len(self._row_cids)
            if row == self._reps.shape[0]:
                grown = np.empty((2 * row, self.dim))
                grown[:row] = self._reps[:row]
                self._reps = grown
            self._rows[cid] = row
            self._row_cids.append(cid)
        self._reps[row] = vec

    @property
    def rep_cids(self):
        return self._row_cids

    @property
    def representatives(self):
        """Centroid matrix, one row per cluster in ascending cid order."""
        return self._reps[:len(self._row_cids)]

    def representative(self, cid):
        return self._reps[self._rows[cid]]

    def _add_cluster(self, c):
        self.clusters[c.cid] = c
        self._set_rep(c.cid, c.stats.centroid)

    def _fresh_cid(self):
        cid = self.next_cid
        self.next_cid += 1
        return cid

    def key_of(self, eid):
        return self.entries[eid].key

    # -- queries -----------------------------------------------------------

    def __len__(self):
        return len(self.clusters)

    @property
    def buffered_total(self):
        return self._buffered_total

    def assign_entry(self, e):
        """Cid of the representative nearest to ``e.key``; ties go to the lowest cid."""
        if not self.clusters:
            raise ValueError("assign into an empty partition")
        key = e.key if isinstance(e, KvEntry) else e
        row, _ = _kernels.nearest_row(key, self.representatives)
        return self._row_cids[row]

    def covered_ids(self, cid):
        c = self.clusters[cid]
        return c.members + [e.id for e in c.buffer]

    def ingested_ids(self):
        return set(self.entries)

    def membership(self):
        """cid -> tuple of member ids (buffers excluded), for equality checks."""
        return {cid: tuple(c.members) for cid, c in self.clusters.items()}

    # -- mutation ----------------------------------------------------------

    def add_cluster(self, entries):
        """Register a new cluster over ``entries`` (used by prefill and re-clustering)."""
        for e in entries:
            if e.id in self.entries:
                raise ValueError(f"duplicate entry id {e.id}")
            self.entries[e.id] = e
        c = Cluster(self._fresh_cid(), [e.id for e in entries],
                    batch_stats([e.key for e in entries]))
        self._add_cluster(c)
        return c.cid

    def ingest(self, e, active=()):
        if e.id in self.entries:
            raise ValueError(f"duplicate entry id {e.id}")
        cid = self.assign_entry(e)
        c = self.clusters[cid]
        candidate = update_stats(c.stats, e.key)
        self.entries[e.id] = e
        if variance(candidate) <= self.threshold:
            c.members.append(e.id)
            c.stats = candidate
            self._set_rep(cid, candidate.centroid)
            return Appended(cid)
        if cid in active:
            event = self._split(cid, [e], reason="immediate")
            return SplitNow(cid, event.new_cid, event)
        c.buffer.append(e)
        c.split_flag = True
        self._buffered_total += 1
        return Deferred(cid)

    def _split(self, cid, extra, reason):
        c = self.clusters[cid]
        extra = list(c.buffer) + list(extra)
        self._buffered_total -= len(c.buffer)
        kept, other, event = split_cluster(c, extra, self.key_of, self._fresh_cid(), reason)
        self.clusters[cid] = kept
        self._set_rep(cid, kept.stats.centroid)
        self._add_cluster(other)
        return event

    def flush_deferred(self, active):
        """Split every flagged cluster that is in ``active``, ascending cid order."""
        events = []
        for cid in sorted(active):
            c = self.clusters.get(cid)
            if c is not None and c.split_flag:
                events.append(self._split(cid, [], reason="deferred"))
        return events

    def enforce_buffer_budget(self):
        """Force-load and split the fullest buffer once the budget is reached."""
        if self._buffered_total == 0 or self._buffered_total < self.buffer_budget:
            return None
        best, best_n = None, 0
        for cid, c in self.clusters.items():
            if len(c.buffer) > best_n:
                best, best_n = cid, len(c.buffer)
        n_members = self.clusters[best].size
        event = self._split(best, [], reason="forced")
        return ForcedLoad(best, n_members, best_n, event)

    # -- invariants --------------------------------------------------------

    def check_conservation(self):
        seen = []
        for c in self.clusters.values():
            seen.extend(c.members)
            seen.extend(e.id for e in c.buffer)
        if len(seen) != len(set(seen)):
            raise AssertionError("entry present in more than one place")
        if set(seen) != set(self.entries):
            raise AssertionError("ingested ids differ from members and buffers")
        if sum(len(c.buffer) for c in self.clusters.values()) != self._buffered_total:
            raise AssertionError("buffer counter out of sync")
        return True

    # -- snapshot ----------------------------------------------------------

    def to_bytes(self):
        return dump_snapshot(self)

    @classmethod
    def from_bytes(cls, blob):
        return load_snapshot(blob)


def init_partition(entries, n_clusters, seed=0, threshold=math.inf,
                   buffer_budget=DEFAULT_BUFFER_BUDGET, head_id=0, layer_id=0):
    """Prefill partition: seeded k-means over the keys with ``n_clusters`` centers."""
    entries = list(entries)
    if n_clusters < 1 or n_clusters > len(entries):
        raise ValueError(f"cannot make {n_clusters} clusters from {len(entries)} entries")
    dim = entries[0].key.shape[0]
    keys = np.stack([e.key for e in entries])
    labels = kmeans(keys, n_clusters, seed=seed)
    p = Partition(dim, threshold, buffer_budget, head_id, layer_id)
    for group in _canonical_groups(labels, n_clusters):
        p.add_cluster([entries[i] for i in group])
    return p


# ---------------------------------------------------------------------------
# binary snapshot
# ---------------------------------------------------------------------------

SNAPSHOT_MAGIC = b"KVTP"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sHIIIIqqqdI")


def dump_snapshot(p):
    """Little-endian snapshot: header, entries, then clusters in cid order."""
    entries = [p.entries[i] for i in sorted(p.entries)]
    vdim = entries[0].value.shape[0] if entries else 0
    parts = [_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, p.dim, vdim,
                          len(entries), len(p.clusters), int(p.head_id), int(p.layer_id),
                          p.next_cid, p.threshold, p.buffer_budget)]
    for e in entries:
        parts.append(struct.pack("<qB", e.id, e.origin.value))
        parts.append(np.asarray(e.key, "<f8").tobytes())
        parts.append(np.asarray(e.value, "<f8").tobytes())
    for cid in sorted(p.clusters):
        c = p.clusters[cid]
        parts.append(struct.pack("<qBIIq", cid, int(c.split_flag), len(c.members),
                                 len(c.buffer), c.stats.n))
        parts.append(np.asarray(c.members, "<i8").tobytes())
        parts.append(np.asarray([e.id for e in c.buffer], "<i8").tobytes())
        parts.append(np.asarray(c.stats.centroid, "<f8").tobytes())
        parts.append(struct.pack("<d", c.stats.scatter))
    return b"".join(parts)


def load_snapshot(blob):
    mv = memoryview(blob)
    (magic, version, dim, vdim, n_entries, n_clusters, head, layer,
     next_cid, threshold, budget) = _HEADER.unpack_from(mv, 0)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError("not a partition snapshot")
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    off = _HEADER.size
    p = Partition(dim, threshold, budget, head, layer)
    for _ in range(n_entries):
        eid, origin = struct.unpack_from("<qB", mv, off)
        off += 9
        key = np.frombuffer(mv, "<f8", dim, off).astype(np.float64)
        off += 8 * dim
        value = np.frombuffer(mv, "<f8", vdim, off).astype(np.float64)
        off += 8 * vdim
        p.entries[eid] = KvEntry(eid, key, value, Origin(origin))
    for _ in range(n_clusters):
        cid, flag, n_members, n_buf, n = struct.unpack_from("<qBIIq", mv, off)
        off += struct.calcsize("<qBIIq")
        members = np.frombuffer(mv, "<i8", n_members, off).tolist()
        off += 8 * n_members
        buf = np.frombuffer(mv, "<i8", n_buf, off).tolist()
        off += 8 * n_buf
        centroid = np.frombuffer(mv, "<f8", dim, off).astype(np.float64)
        off += 8 * dim
        (scatter,) = struct.unpack_from("<d", mv, off)
        off += 8
        c = Cluster(cid, members, ClusterStats(n, centroid, scatter),
                    [p.entries[i] for i in buf], bool(flag))
        p._add_cluster(c)
        p._buffered_total += len(c.buffer)
    p.next_cid = next_cid
    if off != len(blob):
        raise ValueError("trailing bytes in snapshot")
    return p
