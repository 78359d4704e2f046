"""Hot neighbor-search and scatter kernels.

Every kernel exists twice: a numba ``@njit`` loop and a pure-numpy version.
Both return identical results (same distance arithmetic, same tie rule:
equal distances resolve to the lower point index). The numba path is used
when numba imports and ``CMFLOW_DISABLE_NUMBA`` is unset/false; the flag is
read once at import, use :func:`set_backend` to switch at runtime.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_CHUNK = 1024


def _env_wants_numba() -> bool:
    flag = os.environ.get("CMFLOW_DISABLE_NUMBA", "").strip().lower()
    return flag not in ("1", "true", "yes", "on")


USE_NUMBA = HAVE_NUMBA and _env_wants_numba()


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` kernels for subsequent calls."""
    global USE_NUMBA
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        USE_NUMBA = True
    elif name == "numpy":
        USE_NUMBA = False
    else:
        raise ValueError(f"unknown backend {name!r}")


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# k nearest neighbours, sorted by (squared distance, index)


def _knn_np(query, points, k):
    n = query.shape[0]
    idx = np.empty((n, k), dtype=np.int64)
    d2 = np.empty((n, k), dtype=np.float64)
    for s in range(0, n, _CHUNK):
        q = query[s:s + _CHUNK]
        dx = points[None, :, 0] - q[:, None, 0]
        dy = points[None, :, 1] - q[:, None, 1]
        dz = points[None, :, 2] - q[:, None, 2]
        d = dx * dx + dy * dy + dz * dz
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        idx[s:s + _CHUNK] = order
        d2[s:s + _CHUNK] = np.take_along_axis(d, order, axis=1)
    return idx, d2


if HAVE_NUMBA:

    @njit(cache=True)
    def _knn_nb(query, points, k):
        n = query.shape[0]
        m = points.shape[0]
        idx = np.empty((n, k), dtype=np.int64)
        d2 = np.empty((n, k), dtype=np.float64)
        for i in range(n):
            cnt = 0
            qx = query[i, 0]
            qy = query[i, 1]
            qz = query[i, 2]
            for j in range(m):
                dx = points[j, 0] - qx
                dy = points[j, 1] - qy
                dz = points[j, 2] - qz
                d = dx * dx + dy * dy + dz * dz
                if cnt < k:
                    p = cnt
                    cnt += 1
                elif d < d2[i, k - 1]:
                    p = k - 1
                else:
                    continue
                while p > 0 and d2[i, p - 1] > d:
                    d2[i, p] = d2[i, p - 1]
                    idx[i, p] = idx[i, p - 1]
                    p -= 1
                d2[i, p] = d
                idx[i, p] = j
        return idx, d2

    @njit(cache=True)
    def _grid_nearest_nb(query, points, cell):
        m = points.shape[0]
        lo = np.empty(3)
        hi = np.empty(3)
        for a in range(3):
            lo[a] = points[0, a]
            hi[a] = points[0, a]
        for j in range(1, m):
            for a in range(3):
                v = points[j, a]
                if v < lo[a]:
                    lo[a] = v
                if v > hi[a]:
                    hi[a] = v
        dims = np.empty(3, dtype=np.int64)
        for a in range(3):
            dims[a] = int((hi[a] - lo[a]) / cell) + 1
        ncell = dims[0] * dims[1] * dims[2]
        start = np.zeros(ncell + 1, dtype=np.int64)
        cid = np.empty(m, dtype=np.int64)
        for j in range(m):
            c = 0
            for a in range(3):
                ia = int((points[j, a] - lo[a]) / cell)
                if ia >= dims[a]:
                    ia = dims[a] - 1
                c = c * dims[a] + ia
            cid[j] = c
            start[c + 1] += 1
        for c in range(ncell):
            start[c + 1] += start[c]
        fill = start[:-1].copy()
        order = np.empty(m, dtype=np.int64)
        for j in range(m):
            order[fill[cid[j]]] = j
            fill[cid[j]] += 1

        n = query.shape[0]
        out_idx = np.empty(n, dtype=np.int64)
        out_d2 = np.empty(n, dtype=np.float64)
        rmax = max(dims[0], max(dims[1], dims[2]))
        qc = np.empty(3, dtype=np.int64)
        for i in range(n):
            for a in range(3):
                ia = int(np.floor((query[i, a] - lo[a]) / cell))
                if ia < 0:
                    ia = 0
                if ia >= dims[a]:
                    ia = dims[a] - 1
                qc[a] = ia
            best = np.inf
            bj = -1
            r = 0
            while r <= rmax:
                for ox in range(-r, r + 1):
                    ax = qc[0] + ox
                    if ax < 0 or ax >= dims[0]:
                        continue
                    for oy in range(-r, r + 1):
                        ay = qc[1] + oy
                        if ay < 0 or ay >= dims[1]:
                            continue
                        for oz in range(-r, r + 1):
                            if max(abs(ox), max(abs(oy), abs(oz))) != r:
                                continue
                            az = qc[2] + oz
                            if az < 0 or az >= dims[2]:
                                continue
                            c = (ax * dims[1] + ay) * dims[2] + az
                            for s in range(start[c], start[c + 1]):
                                j = order[s]
                                dx = points[j, 0] - query[i, 0]
                                dy = points[j, 1] - query[i, 1]
                                dz = points[j, 2] - query[i, 2]
                                d = dx * dx + dy * dy + dz * dz
                                if d < best or (d == best and j < bj):
                                    best = d
                                    bj = j
                # unvisited points are at least r*cell away
                if bj >= 0 and best < (r * cell) * (r * cell):
                    break
                r += 1
            out_idx[i] = bj
            out_d2[i] = best
        return out_idx, out_d2

    @njit(cache=True)
    def _scatter_add_rows_nb(values, idx, n):
        out = np.zeros((n, values.shape[1]), dtype=values.dtype)
        for r in range(idx.shape[0]):
            j = idx[r]
            for c in range(values.shape[1]):
                out[j, c] += values[r, c]
        return out


def knn(query: np.ndarray, points: np.ndarray, k: int):
    """Indices and squared distances of the ``k`` nearest ``points`` per query.

    Rows are sorted by distance; equal distances keep the lower index first.
    """
    query = np.ascontiguousarray(query, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    if not 1 <= k <= points.shape[0]:
        raise ValueError(f"k={k} outside [1, {points.shape[0]}]")
    if USE_NUMBA:
        return _knn_nb(query, points, k)
    return _knn_np(query, points, k)


def ball_group(query: np.ndarray, points: np.ndarray, radii, nsamples):
    """Multi-scale ball query built on one sorted kNN pass.

    Per scale, picks the ``nsample`` nearest points inside ``radius``.
    Short neighbourhoods are padded with the nearest neighbour, so a point
    queried against its own cloud always contains itself.
    """
    m = points.shape[0]
    kmax = min(max(nsamples), m)
    idx, d2 = knn(query, points, kmax)
    groups = []
    for radius, ns in zip(radii, nsamples):
        k = min(ns, m)
        g = idx[:, :k].copy()
        far = d2[:, :k] > radius * radius
        g[far] = np.broadcast_to(idx[:, :1], g.shape)[far]
        if k < ns:
            pad = np.repeat(idx[:, :1], ns - k, axis=1)
            g = np.concatenate([g, pad], axis=1)
        groups.append(g)
    return groups


def _default_cell(points: np.ndarray) -> float:
    ext = points.max(axis=0) - points.min(axis=0)
    big = float(ext.max())
    if big <= 0.0:
        return 1.0
    ext = np.maximum(ext, 0.01 * big)
    return float(np.cbrt(np.prod(ext) / points.shape[0]))


def nearest(query: np.ndarray, points: np.ndarray, cell: float | None = None):
    """Exact nearest neighbour of every query point.

    The numba path buckets ``points`` into a uniform grid and searches cell
    shells outward; the numpy path is brute force.
    """
    query = np.ascontiguousarray(query, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.shape[0] == 0:
        raise ValueError("empty reference cloud")
    if USE_NUMBA:
        if cell is None:
            cell = _default_cell(points)
        return _grid_nearest_nb(query, points, float(cell))
    idx, d2 = _knn_np(query, points, 1)
    return idx[:, 0], d2[:, 0]


def scatter_add_rows(values: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """``out[idx[r]] += values[r]`` accumulated in row order."""
    values = np.ascontiguousarray(values)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    if USE_NUMBA:
        return _scatter_add_rows_nb(values, idx, n)
    out = np.zeros((n, values.shape[1]), dtype=values.dtype)
    np.add.at(out, idx, values)
    return out
