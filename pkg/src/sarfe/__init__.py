"""Self-attention RoI feature extraction for 3D point clouds.

Pipeline pieces: range clipping and voxelization, farthest point
sampling, radius neighborhoods, RoI grid pooling via set abstraction,
stacked offset-attention feature augmentation, and an analysis harness
that measures how neighborhood sharing collapses pooled-feature
diversity between point- and voxel-fed sources.
"""

__version__ = "0.1.0"
