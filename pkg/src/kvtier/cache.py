"""Bounded DRAM cache over clusters and the layer-pipelined transfer model."""

import math
from dataclasses import dataclass, field
from enum import Enum

from .flash import DeviceConfig

__all__ = [
    "Policy",
    "CacheConfig",
    "CacheEntryMeta",
    "CacheStats",
    "ClusterCache",
    "StageTiming",
    "pipeline_latency",
    "representative_prefetch_cost",
    "transfer_time",
    "virtualized_peak_bytes",
]


class Policy(Enum):
    LRU = "lru"
    CLUSTER_ALIGNED = "cluster_aligned"


@dataclass(frozen=True)
class CacheConfig:
    capacity_bytes: int
    reserved_fraction: float = 0.2
    update_retention_horizon: int = 16
    policy: Policy = Policy.CLUSTER_ALIGNED

    def __post_init__(self):
        if self.capacity_bytes < 0:
            raise ValueError("capacity_bytes must be non-negative")
        if not 0 <= self.reserved_fraction < 1:
            raise ValueError("reserved_fraction must be in [0, 1)")
        if self.update_retention_horizon < 1:
            raise ValueError("update_retention_horizon must be >= 1")


@dataclass
class CacheEntryMeta:
    cid: object
    size_bytes: int
    last_access_step: int = -1
    last_update_step: int = -(1 << 60)
    resident: bool = False


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    passthrough: int = 0
    hit_bytes: int = 0
    miss_bytes: int = 0

    @property
    def hit_rate(self):
        n = self.hits + self.misses
        return self.hits / n if n else 0.0


class ClusterCache:
    """Cluster-granular cache. Keys are any hashable cluster handle."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.meta = {}
        self.resident_bytes = 0
        self.stats = CacheStats()
        self.peak_resident_bytes = 0

    # -- queries -----------------------------------------------------------

    def is_resident(self, key):
        m = self.meta.get(key)
        return m is not None and m.resident

    def resident_keys(self):
        return [k for k, m in self.meta.items() if m.resident]

    def _meta(self, key, size=0):
        m = self.meta.get(key)
        if m is None:
            m = self.meta[key] = CacheEntryMeta(key, int(size))
        return m

    def lookup(self, keys, step):
        """Split ``keys`` into resident hits and misses; hits refresh recency."""
        hits, misses = [], []
        for k in keys:
            m = self.meta.get(k)
            if m is not None and m.resident:
                m.last_access_step = step
                hits.append(k)
                self.stats.hits += 1
                self.stats.hit_bytes += m.size_bytes
            else:
                misses.append(k)
                self.stats.misses += 1
        return hits, misses

    # -- updates -----------------------------------------------------------

    def mark_updated(self, key, step, size_bytes=None):
        m = self._meta(key, size_bytes or 0)
        m.last_update_step = step
        if size_bytes is not None:
            self.resize(key, size_bytes)

    def resize(self, key, size_bytes):
        m = self._meta(key, size_bytes)
        if m.resident:
            self.resident_bytes += int(size_bytes) - m.size_bytes
        m.size_bytes = int(size_bytes)

    def forget(self, key):
        m = self.meta.pop(key, None)
        if m is not None and m.resident:
            self.resident_bytes -= m.size_bytes

    # -- admission / eviction ---------------------------------------------

    def admit_and_evict(self, fetched, step, protect=()):
        """Admit ``(key, size)`` pairs fetched at ``step`` and evict down to capacity.

        Keys in ``protect`` (in use this step) are evicted only as a last
        resort. Returns the evicted keys in eviction order.
        """
        cap = self.cfg.capacity_bytes
        for key, size in fetched:
            m = self._meta(key, size)
            if m.resident:
                self.resize(key, size)
                m.last_access_step = step
                continue
            m.size_bytes = int(size)
            m.last_access_step = step
            if size > cap:
                self.stats.passthrough += 1
                continue
            m.resident = True
            self.resident_bytes += m.size_bytes
            self.stats.miss_bytes += m.size_bytes
        evicted = self.evict_to_capacity(step, protect)
        self.peak_resident_bytes = max(self.peak_resident_bytes, self.resident_bytes)
        return evicted

    def evict_to_capacity(self, step, protect=()):
        protect = set(protect)
        evicted = []
        while self.resident_bytes > self.cfg.capacity_bytes:
            victim = self._victim(step, protect)
            m = self.meta[victim]
            m.resident = False
            self.resident_bytes -= m.size_bytes
            self.stats.evictions += 1
            evicted.append(victim)
        return evicted

    def _reserved(self, step, resident):
        """Recently updated residents that fit in the reserve, newest update first."""
        if self.cfg.policy is not Policy.CLUSTER_ALIGNED:
            return set()
        budget = self.cfg.reserved_fraction * self.cfg.capacity_bytes
        recent = [m for m in resident
                  if step - m.last_update_step <= self.cfg.update_retention_horizon]
        recent.sort(key=lambda m: (-m.last_update_step, -m.last_access_step, _order(m.cid)))
        keep, used = set(), 0
        for m in recent:
            if used + m.size_bytes <= budget:
                keep.add(m.cid)
                used += m.size_bytes
        return keep

    def _victim(self, step, protect):
        resident = [m for m in self.meta.values() if m.resident]
        exempt = self._reserved(step, resident)
        tiers = (
            [m for m in resident if m.cid not in protect and m.cid not in exempt],
            [m for m in resident if m.cid not in protect],
            resident,
        )
        for pool in tiers:
            if pool:
                return self._pick(pool, resident)
        raise RuntimeError("nothing left to evict")

    def _pick(self, pool, resident):
        if self.cfg.policy is Policy.LRU:
            return min(pool, key=lambda m: (m.last_access_step, _order(m.cid))).cid
        # recency rank: 1 for the most recent access step, growing with age
        steps = sorted({m.last_access_step for m in resident}, reverse=True)
        rank = {s: i + 1 for i, s in enumerate(steps)}
        mean = sum(m.size_bytes for m in resident) / len(resident)
        mean = mean if mean > 0 else 1.0
        # highest score; ties go to the older access, then the lower key
        return min(pool, key=lambda m: (-rank[m.last_access_step] * (1.0 + m.size_bytes / mean),
                                        m.last_access_step, _order(m.cid))).cid


def _order(key):
    return key if isinstance(key, tuple) else (key,)


# ---------------------------------------------------------------------------
# pipeline model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageTiming:
    compute_seconds: tuple
    transfer_seconds: tuple

    def __post_init__(self):
        if len(self.compute_seconds) != len(self.transfer_seconds):
            raise ValueError("compute and transfer need one value per layer")
        if not self.compute_seconds:
            raise ValueError("need at least one layer")
        if min(self.compute_seconds) < 0 or min(self.transfer_seconds) < 0:
            raise ValueError("stage times must be non-negative")


def pipeline_latency(t, mode="overlapped"):
    """Latency of one decode step over all layers.

    ``serial``: every layer waits for its own transfer. ``overlapped``: the
    transfer of layer l+1 runs during the compute of layer l, so only the
    first transfer and the last compute are exposed.
    """
    c, x = t.compute_seconds, t.transfer_seconds
    if mode == "serial":
        # one correctly rounded sum keeps the bounds exact in floating point
        return math.fsum(list(c) + list(x))
    if mode != "overlapped":
        raise ValueError(f"unknown pipeline mode {mode!r}")
    nxt = list(x[1:]) + [0.0]
    return math.fsum([x[0]] + [max(ci, ti) for ci, ti in zip(c, nxt)])


def transfer_time(nbytes, cfg=DeviceConfig()):
    """Seconds to stream ``nbytes`` sequentially, cut into max-size commands."""
    if nbytes <= 0:
        return 0.0
    cmds = -(-int(nbytes) // cfg.max_cmd_bytes)
    return cmds * cfg.cmd_overhead + nbytes / cfg.stream_bw


def representative_prefetch_cost(rep_bytes, qkv_compute_seconds, cfg=DeviceConfig()):
    """Part of the representative transfer not hidden behind the Q projection."""
    return max(0.0, transfer_time(rep_bytes, cfg) - qkv_compute_seconds)


def virtualized_peak_bytes(layer_bytes):
    """Peak resident bytes when only one layer plus the next layer's prefetch are held.

    Walks the layer timeline: the prefetch buffer for layer l+1 is allocated
    when layer l starts computing, and layer l is released once it finishes.
    """
    if not layer_bytes:
        return 0
    resident = layer_bytes[0]
    peak = resident
    for l in range(len(layer_bytes)):
        if l + 1 < len(layer_bytes):
            resident += layer_bytes[l + 1]
            peak = max(peak, resident)
        resident -= layer_bytes[l]
    return peak
