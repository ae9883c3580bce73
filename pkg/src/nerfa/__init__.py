"""Seq2seq view synthesis: ray points in, pixel colors out, via NeRF attention."""

from .autograd import Tensor, backward, no_grad
from .model import ModelConfig, NeRFAModel, SigmaColorField, count_madds, feature_modulation, nerf_render
from .rays import Camera, RayBatch, RayPointBatch, generate_rays, sample_ray_points
from .scene import Scene, generate_toy_scene, load_blender_dataset
from .train import TrainConfig, TrainLog, train

__all__ = [
    "Camera", "ModelConfig", "NeRFAModel", "RayBatch", "RayPointBatch", "Scene", "SigmaColorField",
    "Tensor", "TrainConfig", "TrainLog", "backward", "count_madds", "feature_modulation",
    "generate_rays", "generate_toy_scene", "load_blender_dataset", "nerf_render", "no_grad",
    "sample_ray_points", "train",
]
