"""Geometry-aware two-view fusion for multi-view pose estimation at toy scale."""
from .encoding import GeometryEncoder, geo_pe, sine_pe
from .epipolar import FeatureGrid, epipolar_field
from .estimator import TransFusionEstimator
from .exceptions import (
    DegenerateBaseline,
    DegenerateGeometry,
    DegenerateRay,
    DepthNonPositive,
    EpiFusionError,
    FormatError,
    InvalidDim,
    NonFinite,
    ShapeMismatch,
)
from .geometry import CameraParams, fundamental_matrix, pixel_ray, project, triangulate_dlt
from .model import TrainConfig, TransFusionNet
from .synthetic import RenderConfig, SceneDataset, generate_dataset, standard_dataset

__version__ = "0.1.0"

__all__ = [
    "CameraParams",
    "DegenerateBaseline",
    "DegenerateGeometry",
    "DegenerateRay",
    "DepthNonPositive",
    "EpiFusionError",
    "FeatureGrid",
    "FormatError",
    "GeometryEncoder",
    "InvalidDim",
    "NonFinite",
    "RenderConfig",
    "SceneDataset",
    "ShapeMismatch",
    "TrainConfig",
    "TransFusionEstimator",
    "TransFusionNet",
    "epipolar_field",
    "fundamental_matrix",
    "generate_dataset",
    "geo_pe",
    "pixel_ray",
    "project",
    "sine_pe",
    "standard_dataset",
    "triangulate_dlt",
]
