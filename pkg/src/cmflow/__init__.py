"""Radar scene flow learned from odometer, tracked-box and optical-flow pseudo-labels."""

__version__ = "0.1.0"

from .errors import (CMFlowError, DegenerateGeometry, DomainError, EmptyFrame, InvalidConfig,  # noqa: E402
                     InvariantViolation, NonFiniteLoss, NonScalarOutput, ShapeMismatch, ZeroRangePoint)
from .geometry import RigidTransform, weighted_kabsch  # noqa: E402

__all__ = [
    "__version__", "CMFlowError", "DegenerateGeometry", "DomainError", "EmptyFrame", "InvalidConfig",
    "InvariantViolation", "NonFiniteLoss", "NonScalarOutput", "ShapeMismatch", "ZeroRangePoint",
    "RigidTransform", "weighted_kabsch",
]
