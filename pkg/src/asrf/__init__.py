"""Depth-regularized radiance fields from asynchronous RGB-D sequences.

The package couples an implicit time-pose function (multi-resolution 1-D
feature grid + MLP decoder over timestamps) with a spatially partitioned
radiance field, trained in three stages: pose fitting on RGB timestamps,
RGB-only field bootstrap, and joint refinement with ramped dense-depth
supervision.
"""

__version__ = "0.1.0"
