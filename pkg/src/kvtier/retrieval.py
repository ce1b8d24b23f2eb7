"""Cluster selection against representatives and the brute-force oracle."""

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ActiveSet",
    "OracleSet",
    "similarity_scores",
    "select_topk",
    "select_ratio",
    "select_budget",
    "exact_oracle",
    "recall",
    "transfer_waste",
]


@dataclass(frozen=True)
class ActiveSet:
    cids: tuple
    scores: tuple

    def __len__(self):
        return len(self.cids)

    def __contains__(self, cid):
        return cid in self.cids


@dataclass(frozen=True)
class OracleSet:
    entry_ids: frozenset

    def __len__(self):
        return len(self.entry_ids)


def similarity_scores(q, reps, metric="dot"):
    q = np.asarray(q, dtype=np.float64)
    s = reps @ q
    if metric == "cosine":
        norms = np.linalg.norm(reps, axis=1) * np.linalg.norm(q)
        s = np.divide(s, norms, out=np.zeros_like(s), where=norms > 0)
    elif metric != "dot":
        raise ValueError(f"unknown similarity metric {metric!r}")
    return s


def _ranked(q, p, metric):
    if len(p) == 0:
        raise ValueError("retrieval over an empty partition")
    scores = similarity_scores(q, p.representatives, metric)
    # rows are in ascending cid order, so a stable sort on -score breaks ties by cid
    order = np.argsort(-scores, kind="stable")
    cids = p.rep_cids
    return [cids[i] for i in order], scores[order]


def select_topk(q, p, k, metric="dot"):
    """Top ``min(k, len(p))`` clusters by query-representative similarity."""
    if k < 1:
        raise ValueError("k must be >= 1")
    cids, scores = _ranked(q, p, metric)
    return ActiveSet(tuple(cids[:k]), tuple(float(s) for s in scores[:k]))


def select_ratio(q, p, ratio, metric="dot"):
    """Top-k where k is a fraction of the current cluster count (at least one)."""
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    return select_topk(q, p, max(1, math.ceil(ratio * len(p))), metric)


def select_budget(q, p, budget, metric="dot"):
    """Walk clusters in rank order, keeping each one whose members still fit.

    ``budget`` counts flash-resident entries (cluster members). A cluster that
    would overflow the remaining budget is skipped, not truncated.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    cids, scores = _ranked(q, p, metric)
    left = budget
    out_c, out_s = [], []
    for cid, s in zip(cids, scores):
        n = p.clusters[cid].size
        if n <= left:
            out_c.append(cid)
            out_s.append(float(s))
            left -= n
            if left == 0:
                break
    return ActiveSet(tuple(out_c), tuple(out_s))


def exact_oracle(q, ids, keys, m):
    """Exact top-``m`` entry ids by ``q . key``; ties go to the lower id."""
    ids = np.asarray(ids, dtype=np.int64)
    if m > ids.shape[0]:
        raise ValueError(f"oracle budget {m} exceeds population {ids.shape[0]}")
    if m <= 0:
        return OracleSet(frozenset())
    scores = np.asarray(keys, dtype=np.float64) @ np.asarray(q, dtype=np.float64)
    order = np.lexsort((ids, -scores))
    return OracleSet(frozenset(ids[order[:m]].tolist()))


def _fetched_ids(a, p, extra):
    got = set()
    for cid in a.cids:
        got.update(p.covered_ids(cid))
    if extra:
        got.update(extra)
    return got


def recall(a, p, o, always_covered=()):
    """Share of oracle ids covered by the active clusters (buffers included).

    ``always_covered`` holds ids that are memory resident outside any
    cluster and therefore visible to every query.
    """
    if len(o) == 0:
        raise ValueError("recall against an empty oracle set")
    got = _fetched_ids(a, p, always_covered)
    return len(got & o.entry_ids) / len(o)


def transfer_waste(a, p, o):
    """Share of fetched cluster members that are not in the oracle set."""
    if len(a) == 0:
        raise ValueError("waste of an empty active set")
    fetched = set()
    for cid in a.cids:
        fetched.update(p.clusters[cid].members)
    if not fetched:
        return 0.0
    return len(fetched - o.entry_ids) / len(fetched)
