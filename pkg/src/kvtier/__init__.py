"""Adaptive KV-cluster management for a DRAM/flash hierarchy."""

from ._kernels import USING_NUMBA
from .cache import CacheConfig, ClusterCache, Policy, StageTiming, pipeline_latency
from .cluster_store import (Appended, Deferred, KvEntry, Origin, Partition, SplitNow,
                            calibrate_thresholds, init_partition, split_cluster)
from .flash import DeviceConfig, Extent, FlashDevice, IoStats, effective_bandwidth
from .layout import CorrelationMatrix, DualHeadLayout, SequenceLayout, pair_clusters
from .retrieval import exact_oracle, recall, select_topk, transfer_waste
from .vector_stats import ClusterStats, batch_stats, update_stats, variance

__version__ = "0.1.0"

__all__ = [
    "USING_NUMBA",
    "CacheConfig", "ClusterCache", "Policy", "StageTiming", "pipeline_latency",
    "Appended", "Deferred", "KvEntry", "Origin", "Partition", "SplitNow",
    "calibrate_thresholds", "init_partition", "split_cluster",
    "DeviceConfig", "Extent", "FlashDevice", "IoStats", "effective_bandwidth",
    "CorrelationMatrix", "DualHeadLayout", "SequenceLayout", "pair_clusters",
    "exact_oracle", "recall", "select_topk", "transfer_waste",
    "ClusterStats", "batch_stats", "update_stats", "variance",
]
