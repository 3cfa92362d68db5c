"""Dense image-domain optical flow regressed from pairs of sparse lidar scans."""

__version__ = "0.1.0"

from .autodiff import DiffGraph, Tensor4, backward
from .flow_io import FlowField
from .lidar_ingest import CameraModel, GridSpec, PointCloud, RangeImage, SparseLidarFlow
from .network import NetworkConfig, NetworkParams, full_forward, init_params
from .optim import AdamState, adam_step, he_init
from .training import TrainConfig, TrainSample, train_loop

__all__ = [
    "DiffGraph", "Tensor4", "backward", "FlowField", "CameraModel", "GridSpec",
    "PointCloud", "RangeImage", "SparseLidarFlow", "NetworkConfig",
    "NetworkParams", "full_forward", "init_params", "AdamState", "adam_step",
    "he_init", "TrainConfig", "TrainSample", "train_loop",
]
