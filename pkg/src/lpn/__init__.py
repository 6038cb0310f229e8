"""Part-based cross-view geo-localization: square-ring partition pooling, a two-branch
network trained with per-part classification, and retrieval evaluation."""

from .errors import ConfigError, DataError, LPNError, NumericalError
from .partition import (
    PartAssignment,
    PartitionSpec,
    Strategy,
    build_assignment,
    global_average_pool,
    partition_pool,
    pool_gradient,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "LPNError",
    "NumericalError",
    "PartAssignment",
    "PartitionSpec",
    "Strategy",
    "build_assignment",
    "global_average_pool",
    "partition_pool",
    "pool_gradient",
]
