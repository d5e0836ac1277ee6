"""Overlapping temporal decomposition for nonlinear optimal control problems."""

from .core import (BoundaryData, StageSlice, StructureError, SubTrajectory, Trajectory,
                   concatenate, kkt_residual, norm_w, restrict)

__all__ = [
    "BoundaryData", "StageSlice", "StructureError", "SubTrajectory", "Trajectory",
    "concatenate", "kkt_residual", "norm_w", "restrict",
]

__version__ = "0.1.0"
