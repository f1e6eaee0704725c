"""Pipeline hyperparameters and their defaults.

Defaults mirror the published setup this pipeline reproduces: three
feature sources pooled at radii 0.4 / 0.8 / 1.6 m onto a 6x6x6 RoI grid
(216 tokens), 32-channel offset-attention blocks stacked 4 deep, KITTI
scene range with (0.05, 0.05, 0.10) m input voxels, and a 2048-point
budget for farthest point sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .cloudgeom import KITTI_RANGE, KITTI_VOXEL_SIZE, RangeSpec
from .errors import ConfigError


@dataclass(frozen=True)
class SarfeConfig:
    grid_resolution: int = 6
    radii: tuple[float, ...] = (0.4, 0.8, 1.6)  # one feature source per radius
    channel_width: int = 32
    attention_depth: int = 4
    sa_hidden_width: int = 32
    max_neighbors: int = 32
    seed: int = 0
    fps_count: int = 2048
    scene_range: RangeSpec = field(default_factory=lambda: KITTI_RANGE)
    voxel_size: tuple[float, float, float] = KITTI_VOXEL_SIZE

    def __post_init__(self):
        if self.grid_resolution < 1:
            raise ConfigError(f"grid_resolution must be >= 1, got {self.grid_resolution}")
        if not self.radii:
            raise ConfigError("radii must not be empty")
        if any(r <= 0 for r in self.radii):
            raise ConfigError(f"radii must be positive, got {self.radii}")
        if any(a >= b for a, b in zip(self.radii, self.radii[1:])):
            raise ConfigError(f"radii must be strictly increasing, got {self.radii}")
        if self.channel_width < 1:
            raise ConfigError(f"channel_width must be >= 1, got {self.channel_width}")
        if self.attention_depth < 1:
            raise ConfigError(f"attention_depth must be >= 1, got {self.attention_depth}")
        if self.sa_hidden_width < 1:
            raise ConfigError(f"sa_hidden_width must be >= 1, got {self.sa_hidden_width}")
        if self.max_neighbors < 1:
            raise ConfigError(f"max_neighbors must be >= 1, got {self.max_neighbors}")
        if self.fps_count < 1:
            raise ConfigError(f"fps_count must be >= 1, got {self.fps_count}")
        if len(self.voxel_size) != 3 or any(s <= 0 for s in self.voxel_size):
            raise ConfigError(f"voxel_size must be 3 positive values, got {self.voxel_size}")

    @property
    def token_count(self) -> int:
        return self.grid_resolution**3

    @property
    def source_count(self) -> int:
        return len(self.radii)

    def with_seed(self, seed: int) -> "SarfeConfig":
        return replace(self, seed=seed)
