"""Point-cloud geometry: range clipping, voxelization, farthest point
sampling, and radius neighborhood search.

These are the two competing feature sources for RoI pooling: subsampled
raw points on one side, active-voxel centers on the other. All types are
immutable after construction; queries are safe to run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, EmptyInputError, ShapeError


class PointCloud:
    """Ordered (n, 3) coordinates in meters plus (n, k) per-point features."""

    __slots__ = ("xyz", "features")

    def __init__(self, xyz, features=None):
        pts = np.asarray(xyz, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeError(f"PointCloud coordinates must be (n, 3), got {pts.shape}")
        if features is None:
            feats = np.zeros((pts.shape[0], 0))
        else:
            feats = np.asarray(features, dtype=np.float64)
            if feats.ndim != 2:
                raise ShapeError(f"PointCloud features must be 2-d, got ndim={feats.ndim}")
        if feats.shape[0] != pts.shape[0]:
            raise ShapeError(
                f"point/feature length mismatch: {pts.shape[0]} vs {feats.shape[0]}"
            )
        if pts.size and not np.isfinite(pts).all():
            raise ValueError("PointCloud coordinates must be finite")
        if feats.size and not np.isfinite(feats).all():
            raise ValueError("PointCloud features must be finite")
        self.xyz = pts
        self.features = feats

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def feature_width(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(self.xyz[idx], self.features[idx])

    def translated(self, offset) -> "PointCloud":
        return PointCloud(self.xyz + np.asarray(offset, dtype=np.float64), self.features)


@dataclass(frozen=True)
class RangeSpec:
    """Axis-aligned scene bounds in meters; half-open [min, max) per axis."""

    min_corner: tuple[float, float, float]
    max_corner: tuple[float, float, float]

    def __post_init__(self):
        for a, (lo, hi) in enumerate(zip(self.min_corner, self.max_corner)):
            if not lo < hi:
                raise ConfigError(f"range axis {a}: min {lo} must be < max {hi}")

    @property
    def mins(self) -> np.ndarray:
        return np.array(self.min_corner, dtype=np.float64)

    @property
    def maxs(self) -> np.ndarray:
        return np.array(self.max_corner, dtype=np.float64)


KITTI_RANGE = RangeSpec((0.0, -40.0, -3.0), (70.4, 40.0, 1.0))
WAYMO_RANGE = RangeSpec((-75.2, -75.2, -2.0), (75.2, 75.2, 4.0))

KITTI_VOXEL_SIZE = (0.05, 0.05, 0.10)
WAYMO_VOXEL_SIZE = (0.10, 0.10, 0.15)


def grid_extent(range_spec: RangeSpec, voxel_size) -> tuple[int, int, int]:
    """Cell count per axis covering [min, max); KITTI defaults give 1408x1600x40."""
    size = np.asarray(voxel_size, dtype=np.float64)
    if np.any(size <= 0):
        raise ConfigError(f"voxel_size must be positive, got {tuple(size)}")
    span = range_spec.maxs - range_spec.mins
    # guard against x/size landing an ulp above an exact integer
    return tuple(int(v) for v in np.ceil(span / size - 1e-9).astype(np.int64))


@dataclass(frozen=True, eq=False)
class SparseVoxelGrid:
    """Active cells of a regular grid; feature = mean of the points in the cell.

    Cells are stored as parallel arrays sorted by linearized index, which
    fixes a deterministic iteration order.
    """

    voxel_size: tuple[float, float, float]
    origin: tuple[float, float, float]
    extent: tuple[int, int, int]
    coords: np.ndarray = field(repr=False)  # (m, 3) int64
    features: np.ndarray = field(repr=False)  # (m, k)
    counts: np.ndarray = field(repr=False)  # (m,) int64

    @property
    def active_count(self) -> int:
        return self.coords.shape[0]

    def cell_map(self) -> dict[tuple[int, int, int], tuple[np.ndarray, int]]:
        return {
            tuple(int(c) for c in self.coords[i]): (self.features[i], int(self.counts[i]))
            for i in range(self.active_count)
        }


def clip_range(cloud: PointCloud, range_spec: RangeSpec) -> PointCloud:
    """Keep points with min <= coord < max on every axis, preserving order."""
    if len(cloud) == 0:
        return cloud
    mins, maxs = range_spec.mins, range_spec.maxs
    mask = np.all((cloud.xyz >= mins) & (cloud.xyz < maxs), axis=1)
    return PointCloud(cloud.xyz[mask], cloud.features[mask])


def voxelize(cloud: PointCloud, range_spec: RangeSpec, voxel_size) -> SparseVoxelGrid:
    """Quantize an already-clipped cloud onto the grid; cell feature = mean.

    index = floor((p - origin) / voxel_size) per axis, half-open cells, so
    every in-range point lands in exactly one cell.
    """
    size = np.asarray(voxel_size, dtype=np.float64)
    if size.shape != (3,) or np.any(size <= 0):
        raise ConfigError(f"voxel_size must be 3 positive values, got {voxel_size}")
    extent = grid_extent(range_spec, size)
    origin = range_spec.mins
    n = len(cloud)
    if n == 0:
        return SparseVoxelGrid(
            voxel_size=tuple(float(s) for s in size),
            origin=tuple(float(o) for o in origin),
            extent=extent,
            coords=np.empty((0, 3), dtype=np.int64),
            features=np.empty((0, cloud.feature_width)),
            counts=np.empty(0, dtype=np.int64),
        )
    cells = np.floor((cloud.xyz - origin) / size).astype(np.int64)
    # float roundoff at the upper boundary may land one cell past the end
    np.clip(cells, 0, np.asarray(extent, dtype=np.int64) - 1, out=cells)
    keys = (cells[:, 0] * extent[1] + cells[:, 1]) * extent[2] + cells[:, 2]
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    sums = np.zeros((uniq.size, cloud.feature_width))
    np.add.at(sums, inverse, cloud.features)
    means = sums / counts[:, None]
    coords = np.empty((uniq.size, 3), dtype=np.int64)
    coords[:, 2] = uniq % extent[2]
    rest = uniq // extent[2]
    coords[:, 1] = rest % extent[1]
    coords[:, 0] = rest // extent[1]
    return SparseVoxelGrid(
        voxel_size=tuple(float(s) for s in size),
        origin=tuple(float(o) for o in origin),
        extent=extent,
        coords=coords,
        features=means,
        counts=counts.astype(np.int64),
    )


def voxel_centers(grid: SparseVoxelGrid) -> PointCloud:
    """One point per active cell at its geometric center, carrying the cell feature."""
    size = np.asarray(grid.voxel_size)
    origin = np.asarray(grid.origin)
    centers = origin + (grid.coords + 0.5) * size
    return PointCloud(centers, grid.features.copy())


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Indices selected from a cloud; |indices| = min(count, cloud size)."""

    indices: np.ndarray
    count: int


def farthest_point_sampling(cloud: PointCloud, count: int) -> SampleSet:
    """Greedy max-min selection starting at index 0, ties to the lowest index."""
    if count < 1:
        raise ValueError(f"sample count must be >= 1, got {count}")
    if len(cloud) == 0:
        raise EmptyInputError("farthest_point_sampling: empty cloud")
    return SampleSet(indices=kernels.farthest_point_indices(cloud.xyz, count), count=count)


class HashGrid:
    """Uniform spatial hash over a fixed cloud, bucket edge = query radius."""

    def __init__(self, xyz: np.ndarray, radius: float):
        if radius <= 0:
            raise ValueError(f"radius must be positive, got {radius}")
        self.xyz = np.ascontiguousarray(xyz, dtype=np.float64)
        self.radius = float(radius)
        self._grid = kernels.build_grid(self.xyz, self.radius)

    def query_many(self, queries: np.ndarray) -> list[np.ndarray]:
        """Per-query candidate indices with distance strictly < radius (unsorted)."""
        queries = np.ascontiguousarray(queries, dtype=np.float64)
        if len(self.xyz) == 0:
            return [np.empty(0, dtype=np.int64) for _ in range(queries.shape[0])]
        indices, offsets = kernels.radius_query(queries, self.xyz, self.radius, self._grid)
        return [indices[offsets[i] : offsets[i + 1]] for i in range(queries.shape[0])]


def _squared_distances(xyz: np.ndarray, query: np.ndarray) -> np.ndarray:
    dx = xyz[:, 0] - query[0]
    dy = xyz[:, 1] - query[1]
    dz = xyz[:, 2] - query[2]
    return dx * dx + dy * dy + dz * dz


def radius_neighbors_brute(query, xyz: np.ndarray, radius: float) -> np.ndarray:
    """Linear-scan reference: all indices with distance strictly < radius, ascending."""
    if xyz.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    d2 = _squared_distances(xyz, np.asarray(query, dtype=np.float64))
    return np.flatnonzero(d2 < radius * radius).astype(np.int64)


def _truncate_nearest(idx: np.ndarray, d2: np.ndarray, max_neighbors: int) -> np.ndarray:
    """Keep the max_neighbors nearest (ties to lowest index), return ascending indices."""
    if idx.size <= max_neighbors:
        return np.sort(idx)
    keep = np.lexsort((idx, d2))[:max_neighbors]
    return np.sort(idx[keep])


def radius_neighbors(
    query,
    source: PointCloud,
    radius: float,
    max_neighbors: int | None = 32,
) -> np.ndarray:
    """Indices of source points with distance strictly < radius, ascending.

    When more than max_neighbors qualify, the nearest ones are kept (ties to
    the lowest index). Pass max_neighbors=None for the untruncated set.
    """
    return radius_neighbors_many(
        np.asarray(query, dtype=np.float64).reshape(1, 3), source, radius, max_neighbors
    )[0]


def radius_neighbors_many(
    queries: np.ndarray,
    source: PointCloud,
    radius: float,
    max_neighbors: int | None = 32,
) -> list[np.ndarray]:
    """Batch form of radius_neighbors; one ascending index array per query."""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if max_neighbors is not None and max_neighbors < 1:
        raise ValueError(f"max_neighbors must be >= 1, got {max_neighbors}")
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    grid = HashGrid(source.xyz, radius)
    raw = grid.query_many(queries)
    out: list[np.ndarray] = []
    for qi, cand in enumerate(raw):
        if max_neighbors is None or cand.size <= max_neighbors:
            out.append(np.sort(cand))
            continue
        d2 = _squared_distances(source.xyz[cand], queries[qi])
        out.append(_truncate_nearest(cand, d2, max_neighbors))
    return out
