"""Hot numeric kernels.

Every kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature and tie-breaking rules. The numba path is used when numba
imports cleanly, unless ``KVTIER_DISABLE_NUMBA=1`` is set in the environment
before this module is first imported.
"""

import os

import numpy as np

__all__ = [
    "USING_NUMBA",
    "nearest_row",
    "assign_rows",
    "farthest_pair",
    "coalesce_extents",
    "numpy_impl",
    "numba_impl",
]


def _env_disabled():
    return os.environ.get("KVTIER_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _np_sq_dists(x, centers):
    diff = centers - x[None, :]
    return np.einsum("ij,ij->i", diff, diff)


def _np_nearest_row(x, centers):
    d = _np_sq_dists(x, centers)
    # argmin returns the first minimum, i.e. the lowest row on ties
    j = int(np.argmin(d))
    return j, float(d[j])


def _np_assign_rows(points, centers):
    n = points.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    # chunked to keep the (n, k, d) temporary bounded
    step = max(1, 65536 // max(1, centers.shape[0]))
    for s in range(0, n, step):
        blk = points[s:s + step]
        diff = blk[:, None, :] - centers[None, :, :]
        d = np.einsum("ijk,ijk->ij", diff, diff)
        lab = np.argmin(d, axis=1)
        labels[s:s + step] = lab
        dists[s:s + step] = d[np.arange(blk.shape[0]), lab]
    return labels, dists


def _np_farthest_pair(points):
    n = points.shape[0]
    best, bi, bj = -1.0, 0, 1
    for i in range(n - 1):
        diff = points[i + 1:] - points[i]
        d = np.einsum("ij,ij->i", diff, diff)
        j = int(np.argmax(d))
        if d[j] > best:
            best, bi, bj = float(d[j]), i, i + 1 + j
    return bi, bj


def _np_coalesce_extents(offsets, lengths, max_cmd):
    if offsets.shape[0] == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    order = np.argsort(offsets, kind="stable")
    off = offsets[order]
    ln = lengths[order]
    out_o, out_l = [], []
    cur_s = int(off[0])
    cur_e = int(off[0] + ln[0])
    for i in range(1, off.shape[0]):
        s = int(off[i])
        e = s + int(ln[i])
        if s <= cur_e:
            if e > cur_e:
                cur_e = e
        else:
            out_o.append(cur_s)
            out_l.append(cur_e - cur_s)
            cur_s, cur_e = s, e
    out_o.append(cur_s)
    out_l.append(cur_e - cur_s)
    cmd_o, cmd_l = [], []
    for s, n in zip(out_o, out_l):
        while n > max_cmd:
            cmd_o.append(s)
            cmd_l.append(max_cmd)
            s += max_cmd
            n -= max_cmd
        cmd_o.append(s)
        cmd_l.append(n)
    return np.asarray(cmd_o, np.int64), np.asarray(cmd_l, np.int64)


class numpy_impl:
    nearest_row = staticmethod(_np_nearest_row)
    assign_rows = staticmethod(_np_assign_rows)
    farthest_pair = staticmethod(_np_farthest_pair)
    coalesce_extents = staticmethod(_np_coalesce_extents)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

numba_impl = None

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None

if njit is not None:

    @njit(cache=True)
    def _nb_nearest_row(x, centers):
        k, d = centers.shape
        best = np.inf
        bj = 0
        for j in range(k):
            acc = 0.0
            for i in range(d):
                t = centers[j, i] - x[i]
                acc += t * t
            if acc < best:
                best = acc
                bj = j
        return bj, best

    @njit(cache=True)
    def _nb_assign_rows(points, centers):
        n, d = points.shape
        k = centers.shape[0]
        labels = np.empty(n, dtype=np.int64)
        dists = np.empty(n, dtype=np.float64)
        for p in range(n):
            best = np.inf
            bj = 0
            for j in range(k):
                acc = 0.0
                for i in range(d):
                    t = points[p, i] - centers[j, i]
                    acc += t * t
                if acc < best:
                    best = acc
                    bj = j
            labels[p] = bj
            dists[p] = best
        return labels, dists

    @njit(cache=True)
    def _nb_farthest_pair(points):
        n, d = points.shape
        best = -1.0
        bi = 0
        bj = 1
        for a in range(n - 1):
            for b in range(a + 1, n):
                acc = 0.0
                for i in range(d):
                    t = points[b, i] - points[a, i]
                    acc += t * t
                if acc > best:
                    best = acc
                    bi = a
                    bj = b
        return bi, bj

    @njit(cache=True)
    def _nb_coalesce_extents(offsets, lengths, max_cmd):
        m = offsets.shape[0]
        if m == 0:
            return np.empty(0, np.int64), np.empty(0, np.int64)
        order = np.argsort(offsets, kind="mergesort")
        runs_s = np.empty(m, np.int64)
        runs_e = np.empty(m, np.int64)
        r = 0
        cur_s = offsets[order[0]]
        cur_e = cur_s + lengths[order[0]]
        for t in range(1, m):
            s = offsets[order[t]]
            e = s + lengths[order[t]]
            if s <= cur_e:
                if e > cur_e:
                    cur_e = e
            else:
                runs_s[r] = cur_s
                runs_e[r] = cur_e
                r += 1
                cur_s = s
                cur_e = e
        runs_s[r] = cur_s
        runs_e[r] = cur_e
        r += 1
        total = 0
        for t in range(r):
            n = runs_e[t] - runs_s[t]
            total += (n + max_cmd - 1) // max_cmd
        cmd_o = np.empty(total, np.int64)
        cmd_l = np.empty(total, np.int64)
        c = 0
        for t in range(r):
            s = runs_s[t]
            n = runs_e[t] - s
            while n > max_cmd:
                cmd_o[c] = s
                cmd_l[c] = max_cmd
                c += 1
                s += max_cmd
                n -= max_cmd
            cmd_o[c] = s
            cmd_l[c] = n
            c += 1
        return cmd_o, cmd_l

    class numba_impl:  # noqa: N801 - mirrors numpy_impl
        nearest_row = staticmethod(_nb_nearest_row)
        assign_rows = staticmethod(_nb_assign_rows)
        farthest_pair = staticmethod(_nb_farthest_pair)
        coalesce_extents = staticmethod(_nb_coalesce_extents)


USING_NUMBA = numba_impl is not None and not _env_disabled()
_impl = numba_impl if USING_NUMBA else numpy_impl


def nearest_row(x, centers):
    """Index and squared distance of the row of ``centers`` closest to ``x``.

    Ties resolve to the lowest row index.
    """
    j, d = _impl.nearest_row(np.ascontiguousarray(x, np.float64),
                             np.ascontiguousarray(centers, np.float64))
    return int(j), float(d)


def assign_rows(points, centers):
    """Nearest-center label and squared distance for every row of ``points``."""
    return _impl.assign_rows(np.ascontiguousarray(points, np.float64),
                             np.ascontiguousarray(centers, np.float64))


def farthest_pair(points):
    """Indices ``(i, j)``, ``i < j``, of the first farthest pair in row order."""
    if points.shape[0] < 2:
        raise ValueError("farthest_pair needs at least two points")
    i, j = _impl.farthest_pair(np.ascontiguousarray(points, np.float64))
    return int(i), int(j)


def coalesce_extents(offsets, lengths, max_cmd):
    """Merge adjacent/overlapping byte ranges, then chop runs at ``max_cmd``.

    Returns ``(cmd_offsets, cmd_lengths)`` sorted by offset.
    """
    return _impl.coalesce_extents(np.asarray(offsets, np.int64),
                                  np.asarray(lengths, np.int64),
                                  int(max_cmd))
