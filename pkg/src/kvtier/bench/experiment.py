"""End-to-end decode simulation over the two-tier hierarchy.

One decode step, per (layer, head) stream: select clusters for the query,
serve them from the DRAM cache or flash, score recall against the exact
top-m oracle, ingest the new key, run pending splits, update the flash
layout, then admit fetched clusters to the cache.
"""

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from ..cache import (CacheConfig, ClusterCache, StageTiming, pipeline_latency,
                     representative_prefetch_cost, transfer_time, virtualized_peak_bytes)
from ..cluster_store import (Appended, Deferred, KvEntry, Origin, SplitNow,
                             calibrate_thresholds, init_partition, kmeans)
from ..flash import Extent, FlashDevice, IoStats
from ..layout import (CorrelationMatrix, DualHeadLayout, RepackOracle, SequenceLayout,
                      pair_clusters)
from ..retrieval import (exact_oracle, recall, select_budget, select_ratio, select_topk,
                         transfer_waste)
from ..vector_stats import variance
from .config import ConfigError, Strategy
from .workload import generate_workload

__all__ = ["Report", "run_experiment", "StepRecord"]

_DTYPES = {2: np.float16, 4: np.float32, 8: np.float64}
MIB = 1024 * 1024


@dataclass
class StepRecord:
    step: int
    recall: float = 0.0
    waste: float = 0.0
    active_clusters: int = 0
    fetched_bytes: int = 0
    forced_load_bytes: int = 0
    rep_prefetch_bytes: int = 0
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    resident_bytes: int = 0
    read_commands: int = 0
    splits: int = 0
    forced_loads: int = 0
    clusters: int = 0
    buffered: int = 0
    latency_serial: float = 0.0
    latency_overlapped: float = 0.0


@dataclass
class Report:
    config: object
    rows: list
    summary: dict
    access_hist: dict
    layout_dump: str = ""
    io_trace: list = field(default_factory=list)
    partitions: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# per-stream state
# ---------------------------------------------------------------------------

class _Stream:
    def __init__(self, sid, st, cfg, device, base, limit):
        self.sid = sid
        self.st = st
        self.cfg = cfg
        w, s = cfg.workload, cfg.strategy
        self.L0 = w.prefill_len
        self.keys = np.concatenate([st.prefill_keys, st.decode_keys])
        values = np.concatenate([st.prefill_values, st.decode_values])
        dt = _DTYPES[cfg.bytes_per_element]
        kv = np.concatenate([self.keys, values], axis=1).astype(dt)
        self._rows = [kv[i].tobytes() for i in range(kv.shape[0])]
        self.eb = len(self._rows[0])
        self.device = device
        self.window = []
        self.window_ids = []
        self.forced_bytes = 0
        self.fetched_bytes = 0
        self.splits = 0
        self.repack = None
        self.corr = None
        self.partition = None

        prefill = [KvEntry(i, st.prefill_keys[i], st.prefill_values[i], Origin.PREFILL)
                   for i in range(self.L0)]

        if s.strategy is Strategy.NO_CLUSTER or s.layout == "sequence":
            self.layout = SequenceLayout(device, self.eb, self.payload,
                                         self.L0 + w.decode_len, base=base)
            self.layout.write_prefill(self.L0)
            self.dual = False
        else:
            self.layout = None
            self.dual = True
        if s.strategy is Strategy.NO_CLUSTER:
            return

        kseed = [w.seed, st.layer, st.head, 1]
        p = init_partition(prefill, s.clusters, seed=_seed_int(kseed),
                           buffer_budget=s.buffer_budget,
                           head_id=st.head, layer_id=st.layer)
        if s.strategy is Strategy.ADAPTIVE:
            p.threshold = (calibrate_thresholds({0: p}, s.alpha)[0] if s.calibrate
                           else float(s.tau))
        self.partition = p
        self.initial_sizes = {cid: c.size for cid, c in p.clusters.items()}

        self.corr = CorrelationMatrix(len(p))
        for t in range(min(s.warmup, w.decode_len)):
            self.corr.record(self.select(st.queries[t]).cids)
        if s.pairing == "correlation":
            pairs = pair_clusters(self.corr)
        else:
            order = sorted(p.clusters)
            pairs = [(order[i], order[i + 1] if i + 1 < len(order) else None)
                     for i in range(0, len(order), 2)]
        self.pairs = pairs
        if self.dual:
            self.layout = DualHeadLayout(device, self.eb, self.payload,
                                         hot_buffers=s.hot_buffers, base=base, limit=limit)
            self.layout.place_initial(pairs, {cid: list(c.members)
                                              for cid, c in p.clusters.items()})
        if s.repack_oracle:
            self.repack = RepackOracle(self.eb)
            order = [c for pair in pairs for c in pair if c is not None]
            self.repack.place(order, {cid: c.size for cid, c in p.clusters.items()})
        avg = self.L0 / len(p)
        self.local_k = max(1, math.ceil(s.local_window / avg))

    def payload(self, eid):
        return self._rows[eid]

    def select(self, q):
        s = self.cfg.strategy
        if s.selection == "budget":
            return select_budget(q, self.partition, s.fetch_budget, s.similarity)
        if s.selection == "ratio":
            return select_ratio(q, self.partition, s.topk_ratio, s.similarity)
        return select_topk(q, self.partition, s.topk, s.similarity)

    def cluster_bytes(self, cid):
        return self.partition.clusters[cid].size * self.eb

    # -- flash reads -----------------------------------------------------

    def read_clusters(self, cids):
        if not cids:
            return IoStats()
        if self.dual:
            return self.layout.fetch_active(cids)
        ids = []
        for cid in cids:
            ids.extend(self.partition.clusters[cid].members)
        return self.layout.fetch_ids(ids)

    def read_forced(self, event):
        """Read the pre-split parent of a forced load from flash."""
        if self.dual:
            return self.layout.fetch_active([event.cid])
        buffered = set(event.buffered)
        ids = [e for e in event.kept + event.moved if e not in buffered]
        return self.layout.fetch_ids(ids)

    # -- layout updates --------------------------------------------------

    def on_append(self, cid, eid):
        if self.dual:
            self.layout.append_entry(cid, eid)
        if self.repack is not None:
            self.repack.append(cid)

    def on_split(self, event):
        self.splits += 1
        if self.dual:
            self.layout.apply_split(event)
        if self.repack is not None:
            n_new = len(event.buffered)
            self.repack.split(event.cid, event.new_cid,
                              len(event.kept), len(event.moved), n_new)
            # buffered entries join the children; sizes above already include them


def _seed_int(parts):
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

def _device_for(cfg, n_streams):
    w = cfg.workload
    eb = 2 * w.dim * cfg.bytes_per_element
    per_stream = (w.prefill_len + w.decode_len) * eb
    region = int(math.ceil(per_stream * 48 / MIB)) * MIB
    rep_region = int(math.ceil(per_stream / 2 / MIB + 1)) * MIB
    cap = region * n_streams + rep_region * n_streams
    dev_cfg = dataclasses.replace(cfg.device, capacity=cap)
    return dev_cfg, region, rep_region


def run_experiment(cfg, trace=None, trace_io=False, on_step=None):
    """Simulate the decode phase of ``cfg`` and return a ``Report``.

    ``on_step(t, streams)`` is called after every decode step (for audits).
    """
    cfg.validate()
    w, s = cfg.workload, cfg.strategy
    if trace is None:
        trace = generate_workload(w)
    elif trace.config != w:
        raise ConfigError("trace was generated for a different workload config")
    keys = sorted(trace.streams)
    dev_cfg, region, rep_region = _device_for(cfg, len(keys))
    device = FlashDevice(dev_cfg, trace=trace_io)
    streams = []
    for i, key in enumerate(keys):
        streams.append(_Stream(i, trace.streams[key], cfg, device,
                               base=i * region, limit=(i + 1) * region))
    rep_base = region * len(keys)

    eb = streams[0].eb
    total_bytes = (w.prefill_len + w.decode_len) * eb * len(streams)
    cache = ClusterCache(CacheConfig(
        capacity_bytes=int(cfg.cache.cache_ratio * total_bytes),
        reserved_fraction=cfg.cache.reserved_fraction,
        update_retention_horizon=cfg.cache.retention_horizon,
        policy=cfg.cache.policy,
    ))
    write_mark = device.stats.copy()

    rows = []
    layer_peak = []
    rep_bytes_total = 0
    rep_exposed_total = 0.0
    lat_serial = lat_overlap = 0.0
    for t in range(w.decode_len):
        rec = StepRecord(step=t)
        transfer = [0.0] * w.layers
        rep_layer = [0] * w.layers
        recalls, wastes = [], []
        for st in streams:
            t0 = device.stats.simulated_time
            r, wst = _step(st, t, cache, rec)
            transfer[st.st.layer] += device.stats.simulated_time - t0
            recalls.append(r)
            if wst is not None:
                wastes.append(wst)
            if cfg.cache.virtualize and st.partition is not None:
                rep_layer[st.st.layer] += len(st.partition) * w.dim * cfg.bytes_per_element
        if cfg.cache.virtualize:
            for layer, nbytes in enumerate(rep_layer):
                if nbytes:
                    nbytes = min(nbytes, rep_region)
                    before = device.stats.simulated_time
                    _, d = device.read([Extent(rep_base + layer * 0, nbytes)])
                    rec.rep_prefetch_bytes += d.read_bytes
                    rep_exposed_total += representative_prefetch_cost(
                        nbytes, cfg.qkv_seconds, dev_cfg)
        timing = StageTiming(tuple([cfg.compute_seconds] * w.layers), tuple(transfer))
        rec.latency_serial = pipeline_latency(timing, "serial")
        rec.latency_overlapped = pipeline_latency(timing, "overlapped")
        lat_serial += rec.latency_serial
        lat_overlap += rec.latency_overlapped
        rep_bytes_total += rec.rep_prefetch_bytes
        rec.recall = float(np.mean(recalls))
        rec.waste = float(np.mean(wastes)) if wastes else 0.0
        rec.resident_bytes = cache.resident_bytes
        rec.clusters = sum(len(st.partition) for st in streams if st.partition is not None)
        rec.buffered = sum(st.partition.buffered_total for st in streams
                           if st.partition is not None)
        rows.append(rec)
        layer_peak.append(rec.resident_bytes)
        if on_step is not None:
            on_step(t, streams)

    steady = device.stats - write_mark
    drained = IoStats()
    for st in streams:
        if st.layout is not None:
            drained = drained + st.layout.drain()

    summary = _summarise(cfg, streams, rows, device, cache, steady, drained,
                         rep_bytes_total, rep_exposed_total, lat_serial, lat_overlap, eb)
    hist = {}
    for st in streams:
        lengths = st.layout.fetch_lengths if st.layout is not None else []
        for n in lengths:
            k = -(-n // eb)
            hist[k] = hist.get(k, 0) + 1
    dump = ""
    if any(st.dual for st in streams):
        dump = "".join(f"# stream {st.sid}\n{st.layout.dump()}" for st in streams if st.dual)
    return Report(cfg, rows, summary, dict(sorted(hist.items())), dump,
                  list(device.trace or []),
                  {st.sid: st.partition for st in streams})


def _step(st, t, cache, rec):
    cfg = st.cfg
    s = cfg.strategy
    q = st.st.queries[t]
    eid = st.L0 + t
    entry = KvEntry(eid, st.st.decode_keys[t], st.st.decode_values[t], Origin.DECODE)
    n_seen = eid
    oracle = exact_oracle(q, np.arange(n_seen), st.keys[:n_seen], s.oracle_m)

    if s.strategy is Strategy.NO_CLUSTER:
        ids = sorted(oracle.entry_ids)
        d = st.layout.fetch_ids(ids)
        st.fetched_bytes += d.read_bytes
        rec.fetched_bytes += d.read_bytes
        rec.read_commands += d.read_commands
        st.layout.append_entry(eid)
        return 1.0, 0.0

    p = st.partition
    active = st.select(q)
    sid = st.sid
    akeys = [(sid, cid) for cid in active.cids]
    hits, misses = cache.lookup(akeys, t)
    rec.hits += len(hits)
    rec.misses += len(misses)
    rec.active_clusters += len(active)
    miss_cids = [k[1] for k in misses]
    d = st.read_clusters(miss_cids)
    st.fetched_bytes += d.read_bytes
    rec.fetched_bytes += d.read_bytes
    rec.read_commands += d.read_commands

    # deferred keys never left DRAM, so attention sees them like the local window
    visible = st.window_ids
    if p.buffered_total:
        visible = visible + [e.id for c in p.clusters.values() for e in c.buffer]
    r = recall(active, p, oracle, always_covered=visible)
    wst = transfer_waste(active, p, oracle) if len(active) else None

    in_memory = set(active.cids)
    fresh_children = []
    if not st.dual:
        st.layout.append_entry(eid)

    if s.strategy is Strategy.LOCAL:
        st.window.append(entry)
        st.window_ids.append(eid)
        if len(st.window) == s.local_window:
            _recluster_window(st)
    else:
        out = p.ingest(entry, in_memory)
        if isinstance(out, Appended):
            st.on_append(out.cid, eid)
            cache.mark_updated((sid, out.cid), t, st.cluster_bytes(out.cid))
        elif isinstance(out, SplitNow):
            st.on_split(out.event)
            rec.splits += 1
            fresh_children.append(_after_split(st, cache, out.event, t))
        for ev in p.flush_deferred(in_memory):
            st.on_split(ev)
            rec.splits += 1
            fresh_children.append(_after_split(st, cache, ev, t))
        while True:
            forced = p.enforce_buffer_budget()
            if forced is None:
                break
            if cache.is_resident((sid, forced.cid)):
                fd = IoStats()
            else:
                fd = st.read_forced(forced.split)
            st.forced_bytes += fd.read_bytes
            rec.forced_load_bytes += fd.read_bytes
            rec.read_commands += fd.read_commands
            rec.forced_loads += 1
            st.on_split(forced.split)
            rec.splits += 1
            _after_split(st, cache, forced.split, t)

    fetched = [((sid, cid), st.cluster_bytes(cid)) for cid in miss_cids if cid in p.clusters]
    fetched += [c for c in fresh_children if c is not None]
    protect = set(akeys) | {k for k, _ in fetched}
    evicted = cache.admit_and_evict(fetched, t, protect)
    rec.evictions += len(evicted)
    return r, wst


def _after_split(st, cache, event, t):
    """Cache bookkeeping after a split; returns the new child to admit if it is in memory."""
    sid = st.sid
    kept, new = (sid, event.cid), (sid, event.new_cid)
    was_resident = cache.is_resident(kept)
    cache.mark_updated(kept, t, st.cluster_bytes(event.cid))
    cache.mark_updated(new, t, st.cluster_bytes(event.new_cid))
    if event.reason == "forced":
        return None
    if was_resident or event.reason in ("immediate", "deferred"):
        return (new, st.cluster_bytes(event.new_cid))
    return None


def _recluster_window(st):
    s = st.cfg.strategy
    entries = st.window
    keys = np.stack([e.key for e in entries])
    k = min(st.local_k, len(entries))
    labels = kmeans(keys, k, seed=_seed_int([st.cfg.workload.seed, st.sid, entries[0].id]))
    for lab in range(k):
        group = [entries[i] for i in np.flatnonzero(labels == lab)]
        cid = st.partition.add_cluster(group)
        if st.dual:
            st.layout.add_cluster(cid, [e.id for e in group])
        if st.repack is not None:
            st.repack.add(cid, len(group))
    st.window = []
    st.window_ids = []


def _summarise(cfg, streams, rows, device, cache, steady, drained, rep_bytes,
               rep_exposed, lat_serial, lat_overlap, eb):
    io = device.stats
    n = len(rows)
    lengths = [x for st in streams if st.layout is not None for x in st.layout.fetch_lengths]
    variances = [variance(c.stats) for st in streams if st.partition is not None
                 for c in st.partition.clusters.values()]
    dual = [st for st in streams if st.dual]
    allocated = sum(st.layout.allocated_bytes() for st in dual)
    live = sum(st.layout.live_bytes() for st in dual)
    layer_bytes = [0] * cfg.workload.layers
    for st in streams:
        layer_bytes[st.st.layer] += (st.L0 + cfg.workload.decode_len) * eb
    fetched = sum(st.fetched_bytes for st in streams)
    forced = sum(st.forced_bytes for st in streams)
    out = {
        "strategy": cfg.strategy.strategy.value,
        "seed": cfg.workload.seed,
        "steps": n,
        "mean_recall": float(np.mean([r.recall for r in rows])),
        "mean_waste": float(np.mean([r.waste for r in rows])),
        "mean_active_clusters": float(np.mean([r.active_clusters for r in rows])),
        "fetched_bytes": fetched,
        "forced_load_bytes": forced,
        "rep_prefetch_bytes": rep_bytes,
        "read_bytes": io.read_bytes,
        "written_bytes": io.written_bytes,
        "physical_written_bytes": io.physical_written_bytes,
        "steady_write_amplification": steady.write_amplification,
        "drain_written_bytes": drained.written_bytes,
        "commands_issued": io.commands_issued,
        "read_commands": io.read_commands,
        "simulated_io_seconds": io.simulated_time,
        "moved_bytes": io.moved_bytes,
        "repack_moved_bytes": sum(st.repack.moved_bytes for st in streams
                                  if st.repack is not None),
        "allocated_bytes": allocated,
        "live_bytes": live,
        "mean_access_entries": (float(np.mean(lengths)) / eb) if lengths else 0.0,
        "max_access_entries": (max(lengths) / eb) if lengths else 0.0,
        "cache_capacity_bytes": cache.cfg.capacity_bytes,
        "cache_hit_rate": cache.stats.hit_rate,
        "cache_hits": cache.stats.hits,
        "cache_misses": cache.stats.misses,
        "cache_evictions": cache.stats.evictions,
        "cache_passthrough": cache.stats.passthrough,
        "latency_serial_seconds": lat_serial,
        "latency_overlapped_seconds": lat_overlap + rep_exposed,
        "rep_prefetch_exposed_seconds": rep_exposed,
        "splits": sum(st.splits for st in streams),
        "forced_loads": sum(r.forced_loads for r in rows),
        "final_clusters": rows[-1].clusters if rows else 0,
        "variance_mean": float(np.mean(variances)) if variances else 0.0,
        "variance_p50": float(np.percentile(variances, 50)) if variances else 0.0,
        "variance_p90": float(np.percentile(variances, 90)) if variances else 0.0,
        "kv_peak_bytes_full": sum(layer_bytes),
        "kv_peak_bytes_virtualized": virtualized_peak_bytes(layer_bytes),
    }
    return out
