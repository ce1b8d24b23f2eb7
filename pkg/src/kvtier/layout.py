"""Flash placement of clusters.

Co-retrieved clusters share a pool and grow toward each other from opposite
ends, so appends never relocate data and a split only moves the departing
child. A sequence-order layout and a contiguous-repack cost model are kept
alongside as baselines.
"""

import math
from dataclasses import dataclass

import numpy as np

from .flash import Extent, IoStats

__all__ = [
    "CorrelationMatrix",
    "pair_clusters",
    "Pool",
    "DualHeadLayout",
    "SequenceLayout",
    "RepackOracle",
    "LEFT",
    "RIGHT",
]

LEFT, RIGHT = 0, 1


# ---------------------------------------------------------------------------
# co-retrieval correlation
# ---------------------------------------------------------------------------

class CorrelationMatrix:
    """Symmetric co-retrieval counts over the initial clusters."""

    def __init__(self, n_clusters):
        self.n = int(n_clusters)
        self.counts = np.zeros((self.n, self.n), dtype=np.int64)

    def record(self, cids):
        """Count every unordered pair of initial clusters in one active set."""
        ids = sorted({c for c in cids if 0 <= c < self.n})
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                i, j = ids[a], ids[b]
                self.counts[i, j] += 1
                self.counts[j, i] += 1

    def total(self):
        # diagonal is never incremented: self co-retrieval is excluded
        return int(self.counts.sum())

    def probability(self, i, j):
        total = self.total()
        if total == 0:
            raise ZeroDivisionError("no co-retrievals recorded")
        return self.counts[i, j] / total


def pair_clusters(m, cids=None, pair_leftovers=True):
    """Greedy max-weight matching on co-retrieval counts.

    Pairs are taken by descending count, ties in lexicographic cid order.
    Clusters left over (no positive-count partner available) are paired
    among themselves in ascending cid order when ``pair_leftovers`` is set,
    otherwise each gets a pool to itself. Returns ``[(cid, cid_or_None)]``.
    """
    cids = list(range(m.n)) if cids is None else sorted(cids)
    cand = []
    for a in range(len(cids)):
        for b in range(a + 1, len(cids)):
            i, j = cids[a], cids[b]
            if m.counts[i, j] > 0:
                cand.append((-int(m.counts[i, j]), i, j))
    cand.sort()
    used = set()
    pairs = []
    for _, i, j in cand:
        if i not in used and j not in used:
            used.update((i, j))
            pairs.append((i, j))
    rest = [c for c in cids if c not in used]
    if pair_leftovers:
        for a in range(0, len(rest) - 1, 2):
            pairs.append((rest[a], rest[a + 1]))
        if len(rest) % 2:
            pairs.append((rest[-1], None))
    else:
        pairs.extend((c, None) for c in rest)
    return pairs


# ---------------------------------------------------------------------------
# dual-head layout
# ---------------------------------------------------------------------------

@dataclass
class Pool:
    pid: int
    base: int
    capacity: int
    left_cid: int | None = None
    right_cid: int | None = None
    left_fill: int = 0
    right_fill: int = 0
    oversized: bool = False

    def cid(self, side):
        return self.left_cid if side == LEFT else self.right_cid

    def fill(self, side):
        return self.left_fill if side == LEFT else self.right_fill

    def set_side(self, side, cid, fill):
        if side == LEFT:
            self.left_cid, self.left_fill = cid, fill
        else:
            self.right_cid, self.right_fill = cid, fill


class _Placed:
    """Slot bookkeeping for one cluster inside its pool side."""

    __slots__ = ("cid", "pid", "side", "slots", "live", "pending", "updates")

    def __init__(self, cid, pid, side):
        self.cid = cid
        self.pid = pid
        self.side = side
        self.slots = []       # eid per physical slot, None once tombstoned
        self.live = 0
        self.pending = None   # list of eids while a page buffer is attached
        self.updates = 0


class DualHeadLayout:
    """Pools of two clusters growing inward, with page-aligned append buffers.

    ``payload(eid) -> bytes`` serialises one entry; every entry has the same
    size ``entry_bytes``. All device writes go through ``device``.
    """

    def __init__(self, device, entry_bytes, payload, pool_capacity=None,
                 hot_buffers=64, gap_merge_bytes=None, compact_below=0.5,
                 base=0, limit=None):
        self.device = device
        self.eb = int(entry_bytes)
        self.payload = payload
        self.ps = device.cfg.page_size
        self.pool_capacity = pool_capacity
        self.hot_buffers = int(hot_buffers)
        if gap_merge_bytes is None:
            gap_merge_bytes = int(device.cfg.cmd_overhead * device.cfg.stream_bw)
        self.gap_merge_bytes = int(gap_merge_bytes)
        self.compact_below = compact_below
        self.pools = []
        self.placed = {}
        self.where = {}          # eid -> cid for entries written to flash
        self.next_free = base
        self.limit = device.capacity if limit is None else int(limit)
        self.fetch_lengths = []
        self.splits_applied = 0
        self.spills = 0

    # -- geometry ----------------------------------------------------------

    def _round_page(self, nbytes):
        return max(self.ps, -(-nbytes // self.ps) * self.ps)

    def _slot_offset(self, pool, side, i):
        if side == LEFT:
            return pool.base + i * self.eb
        return pool.base + (pool.capacity // self.eb - 1 - i) * self.eb

    def _slots_cap(self, pool):
        return pool.capacity // self.eb

    def _reserved(self, pool, side):
        cid = pool.cid(side)
        if cid is None:
            return 0
        pl = self.placed[cid]
        return len(pl.slots) + (len(pl.pending) if pl.pending else 0)

    def _room(self, pool):
        return self._slots_cap(pool) - self._reserved(pool, LEFT) - self._reserved(pool, RIGHT)

    def _new_pool(self, capacity, oversized=False):
        capacity = self._round_page(capacity)
        if self.next_free + capacity > self.limit:
            raise MemoryError("flash region full")
        pool = Pool(len(self.pools), self.next_free, capacity, oversized=oversized)
        self.next_free += capacity
        self.pools.append(pool)
        return pool

    def _sync_fill(self, pl):
        pool = self.pools[pl.pid]
        pool.set_side(pl.side, pl.cid, len(pl.slots) * self.eb)

    # -- initial placement -------------------------------------------------

    def place_initial(self, pairs, members):
        """Allocate one pool per pair and write each cluster contiguously.

        ``members`` maps cid -> ordered entry ids. The pool capacity defaults
        to twice the largest initial cluster.
        """
        if self.pool_capacity is None:
            biggest = max(len(v) for v in members.values()) * self.eb
            self.pool_capacity = 2 * self._round_page(biggest)
        for a, b in pairs:
            pool = self._new_pool(self.pool_capacity)
            self._install(a, pool, LEFT, members[a], moved=0)
            if b is not None:
                self._install(b, pool, RIGHT, members[b], moved=0)

    def _install(self, cid, pool, side, eids, moved):
        """Write ``eids`` as a fresh contiguous run for ``cid`` at ``pool``/``side``."""
        pl = _Placed(cid, pool.pid, side)
        self.placed[cid] = pl
        pl.slots = list(eids)
        pl.live = len(eids)
        for e in eids:
            self.where[e] = cid
        self._sync_fill(pl)
        return self._write_slots(pl, 0, len(eids), moved=moved)

    def _write_slots(self, pl, start, count, moved=0):
        if count == 0:
            return IoStats()
        pool = self.pools[pl.pid]
        chunk = [self.payload(e) for e in pl.slots[start:start + count]]
        if pl.side == LEFT:
            off = self._slot_offset(pool, LEFT, start)
            data = b"".join(chunk)
        else:
            off = self._slot_offset(pool, RIGHT, start + count - 1)
            data = b"".join(reversed(chunk))
        delta = self.device.write(off, data)
        if moved:
            self.device.stats.moved_bytes += moved
            delta.moved_bytes += moved
        return delta

    # -- appends -----------------------------------------------------------

    def _ensure_buffer(self, pl):
        if pl.pending is not None or self.hot_buffers <= 0:
            return pl.pending is not None
        holders = [p for p in self.placed.values() if p.pending is not None]
        if len(holders) < self.hot_buffers:
            pl.pending = []
            return True
        coldest = min(holders, key=lambda p: (p.updates, p.cid))
        if coldest.updates < pl.updates:
            self._drain(coldest)
            coldest.pending = None
            pl.pending = []
            return True
        return False

    def append_entry(self, cid, eid):
        """Stage one new entry for ``cid``; returns the IoStats of any writes issued."""
        pl = self.placed[cid]
        pl.updates += 1
        pool = self.pools[pl.pid]
        if self._room(pool) < 1:
            delta = self._spill(pl)
            pl = self.placed[cid]
        else:
            delta = IoStats()
        if self._ensure_buffer(pl):
            pl.pending.append(eid)
            return delta + self._flush(pl, final=False)
        pl.slots.append(eid)
        pl.live += 1
        self.where[eid] = cid
        self._sync_fill(pl)
        return delta + self._write_slots(pl, len(pl.slots) - 1, 1)

    def _head_gap(self, pl):
        """Bytes from the cluster head to the next page boundary in its growth direction."""
        pool = self.pools[pl.pid]
        n = len(pl.slots)
        if pl.side == LEFT:
            head = pool.base + n * self.eb
            r = head % self.ps
            return self.ps - r
        head = pool.base + (self._slots_cap(pool) - n) * self.eb
        r = head % self.ps
        return r if r else self.ps

    def _flush(self, pl, final):
        delta = IoStats()
        while pl.pending:
            if final:
                k = len(pl.pending)
            else:
                gap = self._head_gap(pl)
                k = max(1, gap // self.eb)
                if len(pl.pending) * self.eb < gap:
                    break
                k = min(k, len(pl.pending))
            batch, pl.pending[:] = pl.pending[:k], pl.pending[k:]
            start = len(pl.slots)
            pl.slots.extend(batch)
            pl.live += len(batch)
            for e in batch:
                self.where[e] = pl.cid
            self._sync_fill(pl)
            delta = delta + self._write_slots(pl, start, len(batch))
        return delta

    def _drain(self, pl):
        if pl.pending:
            return self._flush(pl, final=True)
        return IoStats()

    def drain(self):
        """Write out every partially filled page buffer."""
        delta = IoStats()
        for pl in self.placed.values():
            delta = delta + self._drain(pl)
        return delta

    # -- relocation --------------------------------------------------------

    def _free_side(self, pl):
        pool = self.pools[pl.pid]
        pool.set_side(pl.side, None, 0)

    def _find_slot(self, need_slots):
        """A free pool side that can hold ``need_slots`` with the partner below half."""
        for pool in reversed(self.pools):
            if pool.oversized:
                continue
            half = self._slots_cap(pool) // 2
            for side in (LEFT, RIGHT):
                if pool.cid(side) is not None:
                    continue
                other = self._reserved(pool, 1 - side)
                if need_slots <= half and other <= half:
                    return pool, side
        return None

    def _relocate(self, pl, eids, moved_eids):
        """Move ``pl`` onto fresh space holding ``eids``; ``moved_eids`` were on flash."""
        need = len(eids) + (len(pl.pending) if pl.pending else 0)
        spot = self._find_slot(need + 1)
        if spot is None:
            if need + 1 > self._slots_cap_for(self.pool_capacity) // 2:
                pool = self._new_pool(2 * (need + 1) * self.eb, oversized=True)
            else:
                # same rule as initial pools: twice the cluster, gap shared with a partner
                pool = self._new_pool(min(self.pool_capacity, 2 * (need + 1) * self.eb))
            side = LEFT
        else:
            pool, side = spot
        pending = pl.pending
        updates = pl.updates
        new = _Placed(pl.cid, pool.pid, side)
        new.pending = pending
        new.updates = updates
        self.placed[pl.cid] = new
        new.slots = list(eids)
        new.live = len(eids)
        for e in eids:
            self.where[e] = pl.cid
        self._sync_fill(new)
        return self._write_slots(new, 0, len(eids), moved=len(moved_eids) * self.eb)

    def _slots_cap_for(self, capacity):
        return capacity // self.eb

    def _spill(self, pl):
        """Relocate a cluster whose pool has no room left."""
        self.spills += 1
        live = [e for e in pl.slots if e is not None]
        self._free_side(pl)
        return self._relocate(pl, live, live)

    def apply_split(self, event):
        """Reflect a logical split. Returns ``(plan, IoStats delta)``.

        The child keeping the parent cid stays in place (its departed slots
        become tombstones); the other child is written to a free pool side.
        """
        parent = self.placed[event.cid]
        moved_set = set(event.moved)
        buffered = set(event.buffered)
        on_flash_b = [e for e in parent.slots if e is not None and e in moved_set]
        pending_b = [e for e in (parent.pending or []) if e in moved_set]
        fresh_b = [e for e in event.moved if e in buffered]

        for i, e in enumerate(parent.slots):
            if e is not None and e in moved_set:
                parent.slots[i] = None
                parent.live -= 1
                del self.where[e]
        if parent.pending:
            parent.pending[:] = [e for e in parent.pending if e not in moved_set]

        child = _Placed(event.new_cid, -1, LEFT)
        child.updates = 1
        child_eids = on_flash_b + pending_b + fresh_b
        delta = self._relocate(child, child_eids, on_flash_b)
        self.splits_applied += 1

        parent.updates += 1
        for e in event.kept:
            if e in buffered:
                delta = delta + self.append_entry(event.cid, e)
        delta = delta + self._maybe_compact(parent)
        plan = {
            "cid": event.cid,
            "new_cid": event.new_cid,
            "moved_ids": tuple(on_flash_b),
            "new_pool": self.placed[event.new_cid].pid,
            "new_side": self.placed[event.new_cid].side,
        }
        return plan, delta

    def _maybe_compact(self, pl):
        if not pl.slots or pl.live >= self.compact_below * len(pl.slots):
            return IoStats()
        live = [e for e in pl.slots if e is not None]
        pl.slots = live
        pl.live = len(live)
        self._sync_fill(pl)
        return self._write_slots(pl, 0, len(live), moved=len(live) * self.eb)

    def add_cluster(self, cid, eids):
        """Place a brand-new cluster (not produced by a split)."""
        pl = _Placed(cid, -1, LEFT)
        return self._relocate(pl, list(eids), [])

    # -- reads -------------------------------------------------------------

    def locate_cluster(self, cid):
        """Extent covering the cluster's live flash bytes, tombstones in between included."""
        if cid not in self.placed:
            raise KeyError(f"unknown cluster {cid}")
        pl = self.placed[cid]
        idx = [i for i, e in enumerate(pl.slots) if e is not None]
        if not idx:
            return []
        pool = self.pools[pl.pid]
        lo, hi = idx[0], idx[-1]
        if pl.side == LEFT:
            start = self._slot_offset(pool, LEFT, lo)
        else:
            start = self._slot_offset(pool, RIGHT, hi)
        return [Extent(start, (hi - lo + 1) * self.eb)]

    def fetch_extents(self, cids):
        """Extents to read for ``cids``: partners in one pool are read through the
        free gap between them when the gap is at most ``gap_merge_bytes``."""
        by_pool = {}
        for cid in cids:
            for ext in self.locate_cluster(cid):
                by_pool.setdefault(self.placed[cid].pid, []).append(ext)
        out = []
        for pid in sorted(by_pool):
            exts = sorted(by_pool[pid], key=lambda e: e.offset)
            cur = exts[0]
            for nxt in exts[1:]:
                gap = nxt.offset - cur.end
                span = nxt.end - cur.offset
                if gap <= self.gap_merge_bytes and span <= self.device.cfg.max_cmd_bytes:
                    cur = Extent(cur.offset, max(cur.end, nxt.end) - cur.offset)
                else:
                    out.append(cur)
                    cur = nxt
            out.append(cur)
        return out

    def fetch_active(self, cids):
        """Read the flash-resident part of ``cids``; returns the IoStats delta."""
        exts = self.fetch_extents(cids)
        if not exts:
            return IoStats()
        n0 = len(self.device.read_command_lengths)
        _, delta = self.device.read(exts)
        self.fetch_lengths.extend(self.device.read_command_lengths[n0:])
        return delta

    def read_cluster_ids(self, cid):
        """Entry ids physically stored for ``cid``, verified byte-for-byte (no I/O charge)."""
        pl = self.placed[cid]
        pool = self.pools[pl.pid]
        out = []
        for i, e in enumerate(pl.slots):
            if e is None:
                continue
            raw = self.device.peek(self._slot_offset(pool, pl.side, i), self.eb)
            if raw != self.payload(e):
                raise AssertionError(f"slot {i} of cluster {cid} does not hold entry {e}")
            out.append(e)
        return out

    def pending_ids(self, cid):
        pl = self.placed[cid]
        return list(pl.pending or [])

    # -- accounting --------------------------------------------------------

    def allocated_bytes(self):
        return sum(p.capacity for p in self.pools)

    def live_bytes(self):
        return sum(pl.live for pl in self.placed.values()) * self.eb

    def dump(self):
        lines = ["pool base capacity left_cid right_cid left_fill right_fill"]
        for p in self.pools:
            lines.append(f"{p.pid} {p.base} {p.capacity} "
                         f"{'-' if p.left_cid is None else p.left_cid} "
                         f"{'-' if p.right_cid is None else p.right_cid} "
                         f"{p.left_fill} {p.right_fill}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# sequence-order baseline
# ---------------------------------------------------------------------------

class SequenceLayout:
    """Entries stored in token order; a cluster is read as its runs of consecutive ids."""

    def __init__(self, device, entry_bytes, payload, max_entries, base=0, buffered=True):
        self.device = device
        self.eb = int(entry_bytes)
        self.payload = payload
        self.base = base
        self.capacity = max_entries * self.eb
        if base + self.capacity > device.capacity:
            raise MemoryError("flash device too small for sequence layout")
        self.buffered = buffered
        self.pending = []
        self.written_upto = 0      # entries [0, written_upto) are on flash
        self.fetch_lengths = []

    def offset(self, eid):
        return self.base + eid * self.eb

    def write_prefill(self, n):
        self.written_upto = n
        data = b"".join(self.payload(e) for e in range(n))
        return self.device.write(self.base, data)

    def append_entry(self, eid):
        if eid != self.written_upto + len(self.pending):
            raise ValueError("sequence layout appends must be in token order")
        if not self.buffered:
            self.written_upto += 1
            return self.device.write(self.offset(eid), self.payload(eid))
        self.pending.append(eid)
        head = self.offset(self.written_upto)
        gap = self.device.cfg.page_size - head % self.device.cfg.page_size
        if len(self.pending) * self.eb >= gap:
            return self._flush()
        return IoStats()

    def _flush(self):
        if not self.pending:
            return IoStats()
        data = b"".join(self.payload(e) for e in self.pending)
        delta = self.device.write(self.offset(self.pending[0]), data)
        self.written_upto += len(self.pending)
        self.pending = []
        return delta

    def drain(self):
        return self._flush()

    def runs(self, eids):
        """Extents for the flash-resident ids, one per run of consecutive ids."""
        ids = sorted(e for e in eids if e < self.written_upto)
        out = []
        if not ids:
            return out
        start = prev = ids[0]
        for e in ids[1:]:
            if e != prev + 1:
                out.append(Extent(self.offset(start), (prev - start + 1) * self.eb))
                start = e
            prev = e
        out.append(Extent(self.offset(start), (prev - start + 1) * self.eb))
        return out

    def fetch_ids(self, eids):
        exts = self.runs(eids)
        if not exts:
            return IoStats()
        n0 = len(self.device.read_command_lengths)
        _, delta = self.device.read(exts)
        self.fetch_lengths.extend(self.device.read_command_lengths[n0:])
        return delta


# ---------------------------------------------------------------------------
# contiguous-repack cost model
# ---------------------------------------------------------------------------

class RepackOracle:
    """Clusters packed back to back in a fixed order with no slack.

    Growing a cluster shifts every cluster stored after it; a split rewrites
    the parent's region so each child is contiguous, and shifts downstream
    clusters when buffered entries join. Only byte movement is counted.
    """

    def __init__(self, entry_bytes):
        self.eb = int(entry_bytes)
        self.order = []
        self.size = {}
        self.moved_bytes = 0

    def place(self, cids_in_order, sizes):
        for c in cids_in_order:
            self.order.append(c)
            self.size[c] = int(sizes[c])

    def _downstream(self, cid):
        i = self.order.index(cid)
        return sum(self.size[c] for c in self.order[i + 1:]) * self.eb

    def append(self, cid, n=1):
        self.moved_bytes += self._downstream(cid)
        self.size[cid] += n

    def split(self, cid, new_cid, n_kept, n_moved, n_new):
        parent_on_flash = self.size[cid]
        self.moved_bytes += parent_on_flash * self.eb
        if n_new:
            self.moved_bytes += self._downstream(cid)
        i = self.order.index(cid)
        self.order.insert(i + 1, new_cid)
        self.size[cid] = n_kept
        self.size[new_cid] = n_moved

    def add(self, cid, n):
        self.order.append(cid)
        self.size[cid] = int(n)
