"""Learned non-rigid point cloud registration with graph descriptors and belief propagation."""

from .errors import (
    ContractError,
    DegenerateMeshError,
    DimensionError,
    FitError,
    FormatError,
    ParseError,
    UnsupportedVersionError,
)

__version__ = "0.1.0"
