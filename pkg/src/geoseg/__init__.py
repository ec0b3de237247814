"""Unsupervised road segmentation from calibrated monocular video.

Weak labels come from camera geometry alone: pixels above the horizon are
non-road and the patch of ground just ahead of the bumper is road. A small
network is trained on those labels, then refined with a mutual-information
consistency loss over corners tracked between frames, focusing on pairs the
current model labels inconsistently. ``geoseg.synthworld`` renders scenes
with exact ground truth so the whole loop can be checked end to end.
"""

__version__ = "0.1.0"

from .errors import GeosegError  # noqa: E402
from .geometry import (  # noqa: E402
    CameraExtrinsics,
    CameraIntrinsics,
    CameraRig,
    VehicleParams,
    build_rig,
    horizon_line,
    load_calibration,
    parse_calibration,
    road_quadrilateral,
)
from .losses import final_loss, geometric_loss, iic_loss  # noqa: E402
from .metrics import EvalResult, consistency_rate, iou  # noqa: E402
from .net import SegNet, load_checkpoint, save_checkpoint  # noqa: E402
from .pipeline import TrainConfig, train  # noqa: E402
from .tracker import Status, TrackerConfig, Tracks, track_frames  # noqa: E402
from .weakmask import Label, PartialMask, rasterize_partial_mask  # noqa: E402

__all__ = [
    "CameraExtrinsics", "CameraIntrinsics", "CameraRig", "EvalResult", "GeosegError",
    "Label", "PartialMask", "SegNet", "Status", "TrackerConfig", "Tracks", "TrainConfig",
    "VehicleParams", "build_rig", "consistency_rate", "final_loss", "geometric_loss",
    "horizon_line", "iic_loss", "iou", "load_calibration", "load_checkpoint",
    "parse_calibration", "rasterize_partial_mask", "road_quadrilateral",
    "save_checkpoint", "track_frames", "train",
]
