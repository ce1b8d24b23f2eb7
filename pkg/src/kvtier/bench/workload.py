"""Synthetic drifting key/query streams.

Keys come from a Gaussian mixture whose component means random-walk on a
sphere, so late decode keys move away from the prefill clusters. Queries
point at a sticky "topic" component, and a share of the new keys is drawn
from that same topic.
"""

from dataclasses import dataclass

import numpy as np

from .config import WorkloadConfig

__all__ = ["StreamTrace", "Trace", "generate_workload", "stream_rng"]


@dataclass(frozen=True, eq=False)
class StreamTrace:
    layer: int
    head: int
    prefill_keys: np.ndarray
    prefill_values: np.ndarray
    prefill_components: np.ndarray
    decode_keys: np.ndarray
    decode_values: np.ndarray
    decode_components: np.ndarray
    queries: np.ndarray
    topics: np.ndarray
    initial_means: np.ndarray

    @property
    def all_keys(self):
        return np.concatenate([self.prefill_keys, self.decode_keys])


@dataclass(frozen=True, eq=False)
class Trace:
    config: WorkloadConfig
    streams: dict

    def stream(self, layer=0, head=0):
        return self.streams[(layer, head)]


def stream_rng(seed, layer, head):
    return np.random.default_rng([int(seed), int(layer), int(head)])


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _generate_stream(w, layer, head):
    rng = stream_rng(w.seed, layer, head)
    d, c, r = w.dim, w.components, w.mean_radius
    means = _unit_rows(rng.standard_normal((c, d))) * r
    initial = means.copy()

    comp0 = rng.integers(c, size=w.prefill_len)
    pk = means[comp0] + w.spread * rng.standard_normal((w.prefill_len, d))
    pv = rng.standard_normal((w.prefill_len, d))

    t_len = w.decode_len
    switch = rng.random(t_len) < w.topic_switch
    new_topic = rng.integers(c, size=t_len)
    on_topic = rng.random(t_len) < w.topic_prob
    off_comp = rng.integers(c, size=t_len)
    key_noise = rng.standard_normal((t_len, d))
    q_noise = rng.standard_normal((t_len, d))
    dv = rng.standard_normal((t_len, d))
    step_scale = w.drift_rate * r / np.sqrt(d)

    dk = np.empty((t_len, d))
    qs = np.empty((t_len, d))
    comps = np.empty(t_len, dtype=np.int64)
    topics = np.empty(t_len, dtype=np.int64)
    topic = int(rng.integers(c))
    for t in range(t_len):
        if switch[t]:
            topic = int(new_topic[t])
        if step_scale > 0:
            means += step_scale * rng.standard_normal((c, d))
            means = _unit_rows(means) * r
        comp = topic if on_topic[t] else int(off_comp[t])
        comps[t] = comp
        topics[t] = topic
        dk[t] = means[comp] + w.spread * key_noise[t]
        qs[t] = means[topic] / r + q_noise[t] / (w.query_temperature * np.sqrt(d))

    return StreamTrace(layer, head, pk, pv, comp0, dk, dv, comps, qs, topics, initial)


def generate_workload(w):
    """Deterministic trace for every (layer, head) stream of ``w``."""
    w.validate()
    streams = {}
    for layer in range(w.layers):
        for head in range(w.heads):
            streams[(layer, head)] = _generate_stream(w, layer, head)
    return Trace(w, streams)
