"""Hot numeric kernels with JIT and pure-numpy twins.

Farthest point sampling and hash-grid radius queries dominate runtime on
large scenes, so each carries a numba @njit implementation next to a
vectorized numpy fallback. The active path is picked once at import:

    SARFE_NUMBA=0   force the numpy fallback (also used when numba is
                    not importable)

Both paths compute distances with the same expression in the same order,
so they return identical results; the test suite asserts this and
benchmarks/bench_kernels.py compares their speed.
"""

from __future__ import annotations

import os

import numpy as np


def _env_wants_numba() -> bool:
    return os.environ.get("SARFE_NUMBA", "1").strip().lower() not in ("0", "false", "off")


try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay importable
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


NUMBA_ENABLED = NUMBA_AVAILABLE and _env_wants_numba()


# ---------------------------------------------------------------------------
# farthest point sampling
# ---------------------------------------------------------------------------


def fps_numpy(xyz: np.ndarray, count: int) -> np.ndarray:
    """Greedy max-min sampling; returns min(count, n) indices, seed index 0.

    Ties on the running max-min distance go to the lowest index (argmax
    first occurrence), matching the jit twin and the exhaustive oracle.
    """
    n = xyz.shape[0]
    m = min(count, n)
    sel = np.zeros(m, dtype=np.int64)
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    dx = x - x[0]
    dy = y - y[0]
    dz = z - z[0]
    best = dx * dx + dy * dy + dz * dz
    for i in range(1, m):
        j = int(np.argmax(best))
        sel[i] = j
        dx = x - x[j]
        dy = y - y[j]
        dz = z - z[j]
        d = dx * dx + dy * dy + dz * dz
        np.minimum(best, d, out=best)
    return sel


@njit(cache=True)
def fps_numba(xyz: np.ndarray, count: int) -> np.ndarray:
    n = xyz.shape[0]
    m = count if count < n else n
    sel = np.zeros(m, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    for k in range(n):
        dx = xyz[k, 0] - xyz[0, 0]
        dy = xyz[k, 1] - xyz[0, 1]
        dz = xyz[k, 2] - xyz[0, 2]
        best[k] = dx * dx + dy * dy + dz * dz
    for i in range(1, m):
        j = 0
        bv = best[0]
        for k in range(1, n):
            if best[k] > bv:
                bv = best[k]
                j = k
        sel[i] = j
        for k in range(n):
            dx = xyz[k, 0] - xyz[j, 0]
            dy = xyz[k, 1] - xyz[j, 1]
            dz = xyz[k, 2] - xyz[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best[k]:
                best[k] = d
    return sel


def farthest_point_indices(xyz: np.ndarray, count: int) -> np.ndarray:
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    if NUMBA_ENABLED:
        return fps_numba(xyz, count)
    return fps_numpy(xyz, count)


# ---------------------------------------------------------------------------
# hash-grid radius queries
# ---------------------------------------------------------------------------
#
# The grid buckets points into cubic cells of edge = query radius; a query
# inspects its own cell plus the 26 surrounding ones. Buckets are stored
# CSR-style: point order sorted by linearized cell key, plus the sorted key
# array for binary search.


def build_grid(xyz: np.ndarray, cell: float):
    """Bucket points into cells of the given edge length.

    Returns (mins, dims, sorted_keys, order) where order[i] is the point
    index at sorted position i.
    """
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    n = xyz.shape[0]
    if n == 0:
        return (
            np.zeros(3),
            np.ones(3, dtype=np.int64),
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.int64),
        )
    mins = xyz.min(axis=0)
    cells = np.floor((xyz - mins) / cell).astype(np.int64)
    dims = cells.max(axis=0) + 1
    keys = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
    order = np.argsort(keys, kind="stable").astype(np.int64)
    return mins, dims, keys[order], order


def radius_query_numpy(
    queries: np.ndarray,
    xyz: np.ndarray,
    radius: float,
    mins: np.ndarray,
    dims: np.ndarray,
    sorted_keys: np.ndarray,
    order: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """CSR neighbor lists (indices, offsets) with strict distance < radius."""
    m = queries.shape[0]
    offsets = np.zeros(m + 1, dtype=np.int64)
    chunks: list[np.ndarray] = []
    r2 = radius * radius
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    for qi in range(m):
        q = queries[qi]
        cq = np.floor((q - mins) / radius).astype(np.int64)
        hits = []
        for ox in (-1, 0, 1):
            cx = cq[0] + ox
            if cx < 0 or cx >= dims[0]:
                continue
            for oy in (-1, 0, 1):
                cy = cq[1] + oy
                if cy < 0 or cy >= dims[1]:
                    continue
                for oz in (-1, 0, 1):
                    cz = cq[2] + oz
                    if cz < 0 or cz >= dims[2]:
                        continue
                    key = (cx * dims[1] + cy) * dims[2] + cz
                    lo = np.searchsorted(sorted_keys, key, side="left")
                    hi = np.searchsorted(sorted_keys, key, side="right")
                    if lo == hi:
                        continue
                    cand = order[lo:hi]
                    dx = x[cand] - q[0]
                    dy = y[cand] - q[1]
                    dz = z[cand] - q[2]
                    d2 = dx * dx + dy * dy + dz * dz
                    inside = cand[d2 < r2]
                    if inside.size:
                        hits.append(inside)
        found = np.concatenate(hits) if hits else np.empty(0, dtype=np.int64)
        chunks.append(found)
        offsets[qi + 1] = offsets[qi] + found.size
    indices = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
    return indices, offsets


@njit(cache=True)
def _radius_query_pass(
    queries, xyz, radius, mins, dims, sorted_keys, order, fill, out_indices, offsets
):
    m = queries.shape[0]
    r2 = radius * radius
    total = 0
    for qi in range(m):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        cqx = np.int64(np.floor((qx - mins[0]) / radius))
        cqy = np.int64(np.floor((qy - mins[1]) / radius))
        cqz = np.int64(np.floor((qz - mins[2]) / radius))
        found = 0
        for ox in range(-1, 2):
            cx = cqx + ox
            if cx < 0 or cx >= dims[0]:
                continue
            for oy in range(-1, 2):
                cy = cqy + oy
                if cy < 0 or cy >= dims[1]:
                    continue
                for oz in range(-1, 2):
                    cz = cqz + oz
                    if cz < 0 or cz >= dims[2]:
                        continue
                    key = (cx * dims[1] + cy) * dims[2] + cz
                    lo = np.searchsorted(sorted_keys, key, side="left")
                    hi = np.searchsorted(sorted_keys, key, side="right")
                    for t in range(lo, hi):
                        idx = order[t]
                        dx = xyz[idx, 0] - qx
                        dy = xyz[idx, 1] - qy
                        dz = xyz[idx, 2] - qz
                        d2 = dx * dx + dy * dy + dz * dz
                        if d2 < r2:
                            if fill:
                                out_indices[offsets[qi] + found] = idx
                            found += 1
        total += found
        if not fill:
            offsets[qi + 1] = total
    return total


def radius_query_numba(
    queries: np.ndarray,
    xyz: np.ndarray,
    radius: float,
    mins: np.ndarray,
    dims: np.ndarray,
    sorted_keys: np.ndarray,
    order: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    m = queries.shape[0]
    offsets = np.zeros(m + 1, dtype=np.int64)
    dummy = np.empty(0, dtype=np.int64)
    total = _radius_query_pass(
        queries, xyz, radius, mins, dims, sorted_keys, order, False, dummy, offsets
    )
    indices = np.empty(total, dtype=np.int64)
    _radius_query_pass(
        queries, xyz, radius, mins, dims, sorted_keys, order, True, indices, offsets
    )
    return indices, offsets


def radius_query(queries: np.ndarray, xyz: np.ndarray, radius: float, grid) -> tuple[np.ndarray, np.ndarray]:
    """Dispatch to the active path; grid is the tuple from build_grid."""
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    mins, dims, sorted_keys, order = grid
    if NUMBA_ENABLED:
        return radius_query_numba(queries, xyz, radius, mins, dims, sorted_keys, order)
    return radius_query_numpy(queries, xyz, radius, mins, dims, sorted_keys, order)


def warmup() -> None:
    """Trigger JIT compilation on tiny inputs (no-op on the numpy path)."""
    if not NUMBA_ENABLED:
        return
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    fps_numba(pts, 2)
    grid = build_grid(pts, 0.5)
    radius_query_numba(pts[:1], pts, 0.5, *grid)
