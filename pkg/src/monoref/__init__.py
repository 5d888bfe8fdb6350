"""Pointmap refinement with monocular priors: autodiff core, geometry, refinement, losses, metrics, fixtures and I/O."""

from .geometry import DegenerateError, RigidPose, Sim3, umeyama
from .losses import LossConfig, loss_pair, loss_refine
from .metrics import cloud_accuracy_completeness, maa30, pose_accuracy
from .pointmap import ConfidenceMap, ImageGrid, Pointmap, align_mono_to_pair
from .refinement import RefineConfig, RefineWeights, init_weights, refine
from .synth import NoiseSpec, SceneFixture, make_scene, make_scenes
from .tensor import GraphError, NonFiniteError, ShapeError, Tensor

__version__ = "0.1.0"

__all__ = [
    "ConfidenceMap",
    "DegenerateError",
    "GraphError",
    "ImageGrid",
    "LossConfig",
    "NoiseSpec",
    "NonFiniteError",
    "Pointmap",
    "RefineConfig",
    "RefineWeights",
    "RigidPose",
    "SceneFixture",
    "ShapeError",
    "Sim3",
    "Tensor",
    "align_mono_to_pair",
    "cloud_accuracy_completeness",
    "init_weights",
    "loss_pair",
    "loss_refine",
    "maa30",
    "make_scene",
    "make_scenes",
    "pose_accuracy",
    "refine",
    "umeyama",
]
