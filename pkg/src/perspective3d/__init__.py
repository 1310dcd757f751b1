"""Perspective points for monocular 3D box estimation: camera geometry,
box parameterization, perspective and reprojection losses, box fitting,
3D IoU evaluation and a synthetic scene generator."""

__version__ = "0.1.0"

from .box3d import Box3D, compose_box, corners, keypoints
from .camera import Camera, CameraExtrinsics, CameraIntrinsics, back_project, project_point
from .errors import (
    BehindCamera,
    ConfigError,
    DegenerateLine,
    InsufficientData,
    NoGroundTruth,
    NonFinite,
    Perspective3DError,
    RejectionOverflow,
)
from .evaluation import Detection, GroundTruth, evaluate, iou3d
from .fitting import FitConfig, fit_box, fit_templates, initial_guess
from .losses import LossWeights, loss_3d, loss_perspective, loss_pp, loss_proj
from .perspective import PerspectivePoints, RoI, TemplateBank, gt_perspective_points, mix_templates
from .synth import SynthConfig, generate_scene, observe

__all__ = [
    "BehindCamera",
    "Box3D",
    "Camera",
    "CameraExtrinsics",
    "CameraIntrinsics",
    "ConfigError",
    "DegenerateLine",
    "Detection",
    "FitConfig",
    "GroundTruth",
    "InsufficientData",
    "LossWeights",
    "NoGroundTruth",
    "NonFinite",
    "Perspective3DError",
    "PerspectivePoints",
    "RejectionOverflow",
    "RoI",
    "SynthConfig",
    "TemplateBank",
    "back_project",
    "compose_box",
    "corners",
    "evaluate",
    "fit_box",
    "fit_templates",
    "generate_scene",
    "gt_perspective_points",
    "initial_guess",
    "iou3d",
    "keypoints",
    "loss_3d",
    "loss_perspective",
    "loss_pp",
    "loss_proj",
    "mix_templates",
    "observe",
    "project_point",
]
