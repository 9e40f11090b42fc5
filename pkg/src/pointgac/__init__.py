"""Geometry-aware patching and codebook-guided teacher-student pretraining for point clouds."""

__version__ = "0.1.0"

from .config import RunConfig, load_config  # noqa: E402
from .geometry import PointCloud, segment_cloud  # noqa: E402
from .transport import PartitionConfig, partition_pipeline  # noqa: E402

__all__ = ["RunConfig", "load_config", "PointCloud", "segment_cloud", "PartitionConfig",
           "partition_pipeline", "__version__"]
