"""Range-image point cloud segmentation tools: scan unfolding++ projection,
range-image guided KNN search, a trainable pointwise decoder and VRCrop
augmentation."""

from rangepdm.cloud_io import PointCloud, SensorSpec
from rangepdm.errors import DataError, FormatError, NumericalError, RangePdmError

__version__ = "0.1.0"

__all__ = [
    "PointCloud",
    "SensorSpec",
    "RangePdmError",
    "FormatError",
    "DataError",
    "NumericalError",
]
