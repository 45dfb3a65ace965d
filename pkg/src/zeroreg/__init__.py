"""Scale-adaptive, training-free point cloud registration."""

from .errors import (ConfigError, DegenerateError, InsufficientDataError, InvalidArgumentError, ParseError,
                     RegistrationFailure, ZeroRegError)
from .geometry import PointCloud, RigidTransform, compose, inverse, rodrigues_align, yaw_rotation
from .io import PipelineConfig, load_cloud, load_config, save_cloud
from .pipeline import MetricReport, RegistrationResult, register, register_lite, rre, rte, success

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DegenerateError", "InsufficientDataError", "InvalidArgumentError", "ParseError",
    "RegistrationFailure", "ZeroRegError", "PointCloud", "RigidTransform", "compose", "inverse",
    "rodrigues_align", "yaw_rotation", "PipelineConfig", "load_cloud", "load_config", "save_cloud",
    "MetricReport", "RegistrationResult", "register", "register_lite", "rre", "rte", "success",
]
