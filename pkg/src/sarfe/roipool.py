"""RoI grid pooling: grid points inside oriented 3D proposals and
multi-radius local feature aggregation via set abstraction.

Each of the g^3 grid points gathers neighbors within a radius, encodes
[neighbor feature, neighbor - grid point] rows with a shared two-layer
MLP, and maxpools the set to one vector. Offsets stay in the world
frame, so outputs are translation-invariant but not rotation-invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore
from .cloudgeom import PointCloud, radius_neighbors_many
from .errors import ShapeError
from .numcore import Parameter, TokenMatrix


def wrap_angle(angle: float) -> float:
    """Map any angle into (-pi, pi]."""
    a = float(angle) % (2.0 * math.pi)
    if a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D proposal: center (m), size (length, width, height) (m),
    yaw (rad) about the vertical axis, in (-pi, pi]."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ValueError(f"box sizes must be positive, got {self.size}")
        if not (-math.pi < self.yaw <= math.pi):
            raise ValueError(f"yaw must lie in (-pi, pi], got {self.yaw}")

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def corners(self) -> np.ndarray:
        """(8, 3) world-frame corners."""
        half = 0.5 * np.asarray(self.size)
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=np.float64,
        )
        return (signs * half) @ self.rotation().T + np.asarray(self.center)

    def contains(self, points: np.ndarray, slack: float = 0.0) -> np.ndarray:
        """Boolean mask: which points fall inside the oriented box."""
        local = (np.asarray(points, dtype=np.float64) - np.asarray(self.center)) @ self.rotation()
        return np.all(np.abs(local) <= 0.5 * np.asarray(self.size) + slack, axis=1)


@dataclass(frozen=True, eq=False)
class GridPointSet:
    """The g^3 pooling query points of one proposal, in world coordinates."""

    box: Box3D
    resolution: int
    points: np.ndarray  # (g^3, 3)

    def __post_init__(self):
        g = self.resolution
        if self.points.shape != (g**3, 3):
            raise ShapeError(f"grid points must be ({g**3}, 3), got {self.points.shape}")
        if not self.box.contains(self.points, slack=1e-9).all():
            raise ValueError("grid point escaped its box")


def generate_grid_points(box: Box3D, g: int) -> GridPointSet:
    """Cell-center lattice inside the box, x-major then y then z.

    Canonical-frame coordinate fractions are (i + 0.5)/g - 0.5 per axis,
    scaled by the box size, rotated by yaw, translated by the center.
    """
    if g < 1:
        raise ValueError(f"grid resolution must be >= 1, got {g}")
    fractions = (np.arange(g) + 0.5) / g - 0.5
    fx, fy, fz = np.meshgrid(fractions, fractions, fractions, indexing="ij")
    local = np.stack([fx.ravel(), fy.ravel(), fz.ravel()], axis=1) * np.asarray(box.size)
    world = local @ box.rotation().T + np.asarray(box.center)
    return GridPointSet(box=box, resolution=g, points=world)


@dataclass(frozen=True, eq=False)
class NeighborSet:
    """Per grid point: neighbor indices and [feature, offset] row matrices.

    Every listed neighbor satisfies ||neighbor - grid point|| < radius
    (strict); offsets are world-frame (neighbor - grid point).
    """

    radius: float
    indices: tuple[np.ndarray, ...]  # ascending per grid point
    rows: tuple[np.ndarray, ...]  # (n_i, feature_width + 3) each


def gather_neighborhoods(
    grid: GridPointSet,
    source: PointCloud,
    radius: float,
    max_neighbors: int | None = 32,
) -> NeighborSet:
    idx_lists = radius_neighbors_many(grid.points, source, radius, max_neighbors)
    rows = []
    for gi, idx in enumerate(idx_lists):
        feats = source.features[idx]
        offsets = source.xyz[idx] - grid.points[gi]
        rows.append(np.hstack([feats, offsets]))
    return NeighborSet(radius=float(radius), indices=tuple(idx_lists), rows=tuple(rows))


@dataclass(frozen=True, eq=False)
class SetAbstractionMlp:
    """Shared two-layer encoder applied to [feature, offset] neighbor rows."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @property
    def in_width(self) -> int:
        return self.w1.values.shape[0]

    @property
    def out_width(self) -> int:
        return self.w2.values.shape[1]

    def named(self, prefix: str) -> dict[str, Parameter]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
                f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2}


def init_set_abstraction_mlp(
    rng: np.random.Generator, in_width: int, hidden_width: int, out_width: int
) -> SetAbstractionMlp:
    w1, b1 = numcore.init_linear_params(rng, in_width, hidden_width)
    w2, b2 = numcore.init_linear_params(rng, hidden_width, out_width)
    return SetAbstractionMlp(w1=w1, b1=b1, w2=w2, b2=b2)


def encode_neighborhoods(neighborhoods: NeighborSet, mlp: SetAbstractionMlp) -> TokenMatrix:
    """Shared MLP -> maxpool per grid point on pre-gathered neighbor rows.

    Grid points with no neighbor inside the radius contribute a zero row,
    which keeps the token count fixed and stays differentiable.
    """
    d = mlp.out_width
    zero_row = TokenMatrix(np.zeros((1, d)))
    pooled: list[TokenMatrix] = []
    for rows in neighborhoods.rows:
        if rows.shape[0] == 0:
            pooled.append(zero_row)
            continue
        h = numcore.relu(numcore.linear(TokenMatrix(rows), mlp.w1, mlp.b1))
        h = numcore.relu(numcore.linear(h, mlp.w2, mlp.b2))
        pooled.append(numcore.maxpool_set(h))
    return numcore.stack_rows(pooled)


def set_abstraction(
    grid: GridPointSet,
    source: PointCloud,
    radius: float,
    mlp: SetAbstractionMlp,
    max_neighbors: int | None = 32,
) -> TokenMatrix:
    """Gather -> shared MLP -> maxpool for every grid point; output g^3 x d."""
    if source.feature_width + 3 != mlp.in_width:
        raise ShapeError(
            f"set_abstraction: source width {source.feature_width} + 3 offsets "
            f"does not match MLP input width {mlp.in_width}"
        )
    return encode_neighborhoods(gather_neighborhoods(grid, source, radius, max_neighbors), mlp)


def multi_radius_pool(
    grid: GridPointSet,
    source: PointCloud,
    radii: Sequence[float],
    mlps: Sequence[SetAbstractionMlp],
    max_neighbors: int | None = 32,
) -> TokenMatrix:
    """Concatenate set_abstraction outputs across radii along channels."""
    if len(radii) != len(mlps):
        raise ValueError(f"got {len(radii)} radii but {len(mlps)} MLPs")
    blocks = [
        set_abstraction(grid, source, r, mlp, max_neighbors)
        for r, mlp in zip(radii, mlps)
    ]
    return numcore.concat_cols(blocks)
