"""Neighborhood-structure analysis of the two RoI feature sources.

When a proposal's grid points share neighbor sets, their pooled features
collapse toward each other, which erases the relationship between a
feature and its position inside the proposal. This harness quantifies
that with two metrics per (box, source, radius):

  duplicate_pair_fraction  fraction of grid-point pairs whose strict-
                           radius neighbor index sets are identical
                           (pre-truncation, so the metric reflects
                           geometry rather than the neighbor cap)
  mean_pairwise_cosine     mean cosine similarity between pooled grid
                           features; all-zero rows count 1 against other
                           zero rows and 0 against nonzero rows

and compares a farthest-point-sampled source against active voxel
centers of the same scene.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cloudgeom import (
    PointCloud,
    farthest_point_sampling,
    radius_neighbors_many,
    voxel_centers,
    voxelize,
)
from .config import SarfeConfig
from .errors import DomainError
from .numcore import TokenMatrix
from .roipool import Box3D, GridPointSet, generate_grid_points, init_set_abstraction_mlp, set_abstraction

FPS_SOURCE = "fps"
VOXEL_SOURCE = "voxel"


def neighborhood_signatures(
    grid: GridPointSet, source: PointCloud, radius: float
) -> list[tuple[int, ...]]:
    """Sorted neighbor index tuple per grid point, strict radius, untruncated."""
    idx_lists = radius_neighbors_many(grid.points, source, radius, max_neighbors=None)
    return [tuple(int(i) for i in idx) for idx in idx_lists]


def duplicate_fraction(signatures: Sequence[tuple[int, ...]]) -> float:
    """Fraction of unordered signature pairs that are identical."""
    n = len(signatures)
    if n < 2:
        raise DomainError(f"duplicate_fraction needs >= 2 signatures, got {n}")
    same = sum(m * (m - 1) // 2 for m in Counter(signatures).values())
    return same / (n * (n - 1) // 2)


def feature_diversity(features: TokenMatrix | np.ndarray) -> float:
    """Mean pairwise cosine similarity across token rows.

    Zero rows are similar (1) to other zero rows and dissimilar (0) to
    everything else, so degenerate all-empty sources compare as maximally
    redundant.
    """
    x = features.data if isinstance(features, TokenMatrix) else np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise DomainError(f"feature_diversity needs >= 2 rows, got {n}")
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0.0
    nz = ~zero
    total = 0.0
    k_nz = int(nz.sum())
    if k_nz >= 2:
        unit = x[nz] / norms[nz, None]
        cos = unit @ unit.T
        total += (cos.sum() - np.trace(cos)) / 2.0
    k_zero = int(zero.sum())
    total += k_zero * (k_zero - 1) / 2.0  # zero-zero pairs
    return float(total / (n * (n - 1) // 2))


@dataclass(frozen=True)
class StructureReport:
    """Metrics for one (box, source, radius) cell of the comparison."""

    box_id: int
    source: str
    radius: float
    duplicate_pair_fraction: float
    distinct_signature_count: int
    mean_pairwise_cosine: float

    def __post_init__(self):
        if not 0.0 <= self.duplicate_pair_fraction <= 1.0:
            raise ValueError(f"duplicate_pair_fraction out of [0,1]: {self.duplicate_pair_fraction}")
        if not -1.0 - 1e-9 <= self.mean_pairwise_cosine <= 1.0 + 1e-9:
            raise ValueError(f"mean_pairwise_cosine out of [-1,1]: {self.mean_pairwise_cosine}")


def bottleneck_experiment(
    scene: PointCloud,
    boxes: Sequence[Box3D],
    config: SarfeConfig,
    fps_count: int | None = None,
) -> list[StructureReport]:
    """Paired structure reports for the sampled-point and voxel-center sources.

    The scene must already be clipped to config.scene_range. Both sources
    are pooled with the same seeded MLP per radius so the diversity numbers
    compare sources, not weights.
    """
    budget = config.fps_count if fps_count is None else fps_count
    sample = farthest_point_sampling(scene, budget)
    sources = [
        (FPS_SOURCE, scene.subset(sample.indices)),
        (VOXEL_SOURCE, voxel_centers(voxelize(scene, config.scene_range, config.voxel_size))),
    ]
    rng = np.random.default_rng(config.seed)
    feature_width = scene.feature_width
    mlps = {
        radius: init_set_abstraction_mlp(
            rng, feature_width + 3, config.sa_hidden_width, config.channel_width
        )
        for radius in config.radii
    }
    reports: list[StructureReport] = []
    for box_id, box in enumerate(boxes):
        grid = generate_grid_points(box, config.grid_resolution)
        for source_name, source in sources:
            for radius in config.radii:
                signatures = neighborhood_signatures(grid, source, radius)
                pooled = set_abstraction(
                    grid, source, radius, mlps[radius], config.max_neighbors
                )
                reports.append(
                    StructureReport(
                        box_id=box_id,
                        source=source_name,
                        radius=radius,
                        duplicate_pair_fraction=duplicate_fraction(signatures),
                        distinct_signature_count=len(set(signatures)),
                        mean_pairwise_cosine=feature_diversity(pooled),
                    )
                )
    return reports


CSV_COLUMNS = (
    "box_id",
    "source",
    "radius",
    "duplicate_pair_fraction",
    "distinct_signatures",
    "mean_pairwise_cosine",
)


def write_reports_csv(reports: Sequence[StructureReport], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow(
                [
                    r.box_id,
                    r.source,
                    repr(float(r.radius)),
                    repr(float(r.duplicate_pair_fraction)),
                    r.distinct_signature_count,
                    repr(float(r.mean_pairwise_cosine)),
                ]
            )
