"""Two-stage 3D single-object tracking: box motion prediction, then BEV matching with iterative refinement."""

from .bev import RegionSpec
from .bmp import BmpConfig, CoarseMotion
from .geometry import OrientedBox3D, iou3d
from .irm import IrmConfig
from .ope import OpeResult, evaluate_ope
from .pipeline import ModelConfig, forward_pair, init_weights, predict_box
from .rim import RimConfig
from .sim import SimSpec, Tracklet, simulate
from .tracker import track_sequence

__all__ = [
    "BmpConfig",
    "CoarseMotion",
    "IrmConfig",
    "ModelConfig",
    "OpeResult",
    "OrientedBox3D",
    "RegionSpec",
    "RimConfig",
    "SimSpec",
    "Tracklet",
    "evaluate_ope",
    "forward_pair",
    "init_weights",
    "iou3d",
    "predict_box",
    "simulate",
    "track_sequence",
]
