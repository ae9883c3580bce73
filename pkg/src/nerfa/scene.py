"""Scenes: Blender-format dataset loading and an analytic toy sphere scene."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image as PILImage

from .rays import Camera, DomainError, generate_rays, look_at

SPLITS = ("train", "val", "test")
DEFAULT_NEAR, DEFAULT_FAR = 2.0, 6.0


class ValidationError(ValueError):
    pass


@dataclass
class View:
    camera: Camera
    image: np.ndarray  # (H, W, 3) in [0, 1]
    split: str = "train"


@dataclass
class Scene:
    views: List[View]
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    def __post_init__(self):
        if not self.near < self.far:
            raise DomainError(f"near={self.near} must be < far={self.far}")
        if not any(v.split == "train" for v in self.views):
            raise ValidationError("scene needs at least one train view")
        shapes = {v.image.shape for v in self.views}
        if len(shapes) != 1:
            raise ValidationError(f"views have differing image shapes: {sorted(shapes)}")

    def split(self, name: str) -> List[View]:
        return [v for v in self.views if v.split == name]

    @property
    def image_shape(self) -> tuple:
        return self.views[0].image.shape


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"image must be HxWx3, got {img.shape}")
    if img.min() < 0 or img.max() > 1:
        raise ValidationError("image values must lie in [0, 1]")
    return img


# ---------------------------------------------------------------------------
# Blender synthetic format


def _read_rgb(path: str) -> np.ndarray:
    with PILImage.open(path) as im:
        im.load()
        if im.mode in ("RGBA", "LA", "P"):
            rgba = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
            alpha = rgba[..., 3:]
            return rgba[..., :3] * alpha + (1.0 - alpha)
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def _frame_path(root: str, file_path: str) -> str:
    p = os.path.join(root, file_path)
    if os.path.splitext(p)[1]:
        return p
    return p + ".png"


def load_blender_dataset(dir_path: str, near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR,
                         splits: Sequence[str] = SPLITS, rigid_tol: float = 1e-4) -> Scene:
    """Load ``transforms_{split}.json`` files and their frames into a :class:`Scene`.

    Images with alpha are composited onto white.
    """
    if not os.path.isdir(dir_path):
        raise FileNotFoundError(f"dataset directory not found: {dir_path}")
    views: List[View] = []
    for split in splits:
        meta_path = os.path.join(dir_path, f"transforms_{split}.json")
        if not os.path.isfile(meta_path):
            raise FileNotFoundError(f"missing {meta_path}")
        with open(meta_path) as fh:
            meta = json.load(fh)
        angle = float(meta["camera_angle_x"])
        for i, frame in enumerate(meta["frames"]):
            m = np.asarray(frame["transform_matrix"], dtype=np.float64)
            if m.shape != (4, 4):
                raise ValidationError(f"{meta_path} frame {i}: transform_matrix is {m.shape}, not 4x4")
            r = m[:3, :3]
            err = max(np.abs(r.T @ r - np.eye(3)).max(), abs(np.linalg.det(r) - 1.0))
            if err > rigid_tol:
                raise ValidationError(f"{meta_path} frame {i}: rotation not orthonormal (err {err:.3g})")
            path = _frame_path(dir_path, frame["file_path"])
            if not os.path.isfile(path):
                raise FileNotFoundError(f"missing image {path}")
            img = _read_rgb(path)
            h, w = img.shape[:2]
            focal = 0.5 * w / math.tan(0.5 * angle)
            views.append(View(Camera(m, focal, w, h), img, split))
    return Scene(views, near, far)


# ---------------------------------------------------------------------------
# analytic toy scene


@dataclass
class Sphere:
    center: tuple
    radius: float
    color: tuple


@dataclass
class ToySceneConfig:
    image_size: int = 16
    n_views: int = 8
    spheres: Optional[List[Sphere]] = None
    n_spheres: int = 3
    radius: float = 4.0
    fov_deg: float = 40.0
    elevation_deg: float = 0.0
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR
    splits: Optional[List[str]] = field(default=None)


def random_spheres(rng: np.random.Generator, n: int) -> List[Sphere]:
    out = []
    for _ in range(n):
        center = tuple(rng.uniform(-0.6, 0.6, size=3))
        radius = float(rng.uniform(0.3, 0.6))
        color = tuple(rng.uniform(0.0, 0.9, size=3))
        out.append(Sphere(center, radius, color))
    return out


def trace_spheres(origins: np.ndarray, dirs: np.ndarray, spheres: Sequence[Sphere]) -> np.ndarray:
    """Flat color of the nearest sphere hit along each unit ray; white if none."""
    colors = np.ones((len(origins), 3))
    best = np.full(len(origins), np.inf)
    for s in spheres:
        oc = origins - np.asarray(s.center, dtype=np.float64)
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - s.radius**2
        disc = b * b - c
        hit = disc >= 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        t = -b - root
        t = np.where(t > 0, t, -b + root)
        hit &= t > 0
        closer = hit & (t < best)
        best[closer] = t[closer]
        colors[closer] = s.color
    return colors


def _default_split(k: int) -> str:
    # even views train; odd views alternate val / test
    if k % 2 == 0:
        return "train"
    return "val" if (k // 2) % 2 == 0 else "test"


def generate_toy_scene(seed: int = 0, config: Optional[ToySceneConfig] = None) -> Scene:
    """Cameras on a ring around the y axis looking at the origin; view 0 sits on +z."""
    cfg = config or ToySceneConfig()
    if cfg.image_size < 8:
        raise DomainError(f"image_size must be >= 8, got {cfg.image_size}")
    if cfg.n_views < 2:
        raise DomainError(f"n_views must be >= 2, got {cfg.n_views}")
    rng = np.random.default_rng(seed)
    spheres = cfg.spheres if cfg.spheres is not None else random_spheres(rng, cfg.n_spheres)
    size = cfg.image_size
    focal = 0.5 * size / math.tan(0.5 * math.radians(cfg.fov_deg))
    elev = math.radians(cfg.elevation_deg)
    views = []
    for k in range(cfg.n_views):
        theta = 2.0 * math.pi * k / cfg.n_views
        eye = cfg.radius * np.array([
            math.cos(elev) * math.sin(theta), math.sin(elev), math.cos(elev) * math.cos(theta)])
        cam = Camera(look_at(eye), focal, size, size)
        rays = generate_rays(cam, cam.all_pixels())
        img = trace_spheres(rays.origins, rays.directions, spheres).reshape(size, size, 3)
        split = cfg.splits[k] if cfg.splits is not None else _default_split(k)
        views.append(View(cam, img, split))
    return Scene(views, cfg.near, cfg.far)
