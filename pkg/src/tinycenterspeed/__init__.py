"""Center-based opponent detection from 2D LiDAR with velocity heatmaps."""

from .bev import BevConfig
from .decode import DecodeConfig, decode
from .domain import Detection, EgoState, LidarScan, OppState, ReferenceLine
from .model import LossConfig, TinyCenterSpeed, TrainConfig, total_loss, train

__all__ = ["BevConfig", "DecodeConfig", "Detection", "EgoState", "LidarScan", "LossConfig", "OppState",
           "ReferenceLine", "TinyCenterSpeed", "TrainConfig", "decode", "total_loss", "train"]
__version__ = "0.1.0"
