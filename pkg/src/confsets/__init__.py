"""Conformal covering sets in embedding spaces with learnable norm geometry."""
from .geometry import (
    DegenerateSetError,
    FixedL2,
    FixedMahalanobis,
    Generalized,
    GeometryError,
    SingleNorm,
    distance,
    distance_grad,
    log_volume,
    log_volume_grad,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateSetError",
    "FixedL2",
    "FixedMahalanobis",
    "Generalized",
    "GeometryError",
    "SingleNorm",
    "distance",
    "distance_grad",
    "log_volume",
    "log_volume_grad",
]
