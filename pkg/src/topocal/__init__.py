"""Dictionary-based homography estimation over planar semantic scenes."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    DegenerateHomographyError,
    EmptyDictionaryError,
    InvalidInputError,
    InvalidParameterError,
    InvalidSpecError,
    TopocalError,
)
from .geometry import CameraParams, GroundFrame, Homography, compose, homography_from_params, invert, normalize  # noqa: E402
from .loss import TopoLossConfig, loss_config, topo_loss  # noqa: E402
from .raster import SemanticMap, iou, load_map, save_map, warp_labels, warp_onehot  # noqa: E402

__all__ = [
    "__version__",
    "CameraParams",
    "DegenerateHomographyError",
    "EmptyDictionaryError",
    "GroundFrame",
    "Homography",
    "InvalidInputError",
    "InvalidParameterError",
    "InvalidSpecError",
    "SemanticMap",
    "TopoLossConfig",
    "TopocalError",
    "compose",
    "homography_from_params",
    "invert",
    "iou",
    "load_map",
    "loss_config",
    "normalize",
    "save_map",
    "topo_loss",
    "warp_labels",
    "warp_onehot",
]
