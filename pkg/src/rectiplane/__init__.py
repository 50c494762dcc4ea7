"""Two-stage rectification of planar document images."""

from .errors import RectiplaneError
from .geometry import AngleBins, Homography, PerspectiveEncoding, PlanarParams, homography_from_params
from .models import DESK_CONFIG, FULL_CONFIG, NetConfig, Rectifier
from .training import LossConfig, MetricsReport, TrainConfig, evaluate, train_stage

__version__ = "0.1.0"

__all__ = [
    "RectiplaneError", "AngleBins", "Homography", "PerspectiveEncoding", "PlanarParams",
    "homography_from_params", "DESK_CONFIG", "FULL_CONFIG", "NetConfig", "Rectifier",
    "LossConfig", "MetricsReport", "TrainConfig", "evaluate", "train_stage",
]
