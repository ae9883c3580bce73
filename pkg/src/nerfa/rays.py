"""Pinhole cameras, ray generation and uniform sampling of ray points."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class BoundsError(IndexError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    """A pinhole camera looking down its local -z axis (x right, y up)."""

    world_from_camera: np.ndarray
    focal: float
    width: int
    height: int

    def __post_init__(self):
        m = np.asarray(self.world_from_camera, dtype=np.float64)
        if m.shape != (4, 4):
            raise DomainError(f"world_from_camera must be 4x4, got {m.shape}")
        object.__setattr__(self, "world_from_camera", m)
        if not self.focal > 0:
            raise DomainError(f"focal must be positive, got {self.focal}")
        if self.width < 1 or self.height < 1:
            raise DomainError(f"bad image size {self.width}x{self.height}")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_from_camera[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.world_from_camera[:3, 3]

    def is_rigid(self, tol: float = 1e-8) -> bool:
        r = self.rotation
        return (
            np.abs(r.T @ r - np.eye(3)).max() <= tol
            and abs(np.linalg.det(r) - 1.0) <= tol
            and np.array_equal(self.world_from_camera[3], [0.0, 0.0, 0.0, 1.0])
        )

    def all_pixels(self) -> np.ndarray:
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([rows.ravel(), cols.ravel()], axis=-1)


@dataclass
class RayBatch:
    origins: np.ndarray  # (N_p, 3)
    directions: np.ndarray  # (N_p, 3), unit norm
    pixel_ids: np.ndarray  # (N_p, 2) as (row, col)

    def __len__(self) -> int:
        return len(self.origins)


@dataclass
class RayPointBatch:
    points: np.ndarray  # (N_p, N_r, 6): xyz then view direction
    t: np.ndarray  # (N_p, N_r)
    deltas: np.ndarray  # (N_p, N_r)

    @property
    def n_rays(self) -> int:
        return self.points.shape[0]

    @property
    def n_samples(self) -> int:
        return self.points.shape[1]


def look_at(eye: Sequence[float], target: Sequence[float] = (0.0, 0.0, 0.0),
            up: Sequence[float] = (0.0, 1.0, 0.0)) -> np.ndarray:
    """World-from-camera transform for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(up, back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, true_up, back, eye
    return m


def generate_rays(camera: Camera, pixels) -> RayBatch:
    """One ray per (row, col) pixel, through the pixel center."""
    pix = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    rows, cols = pix[:, 0], pix[:, 1]
    bad = (rows < 0) | (rows >= camera.height) | (cols < 0) | (cols >= camera.width)
    if bad.any():
        r, c = pix[np.argmax(bad)]
        raise BoundsError(f"pixel ({r}, {c}) outside {camera.height}x{camera.width} image")
    cam_dirs = np.stack(
        [
            (cols + 0.5 - camera.width / 2) / camera.focal,
            -(rows + 0.5 - camera.height / 2) / camera.focal,
            -np.ones(len(pix)),
        ],
        axis=-1,
    )
    dirs = cam_dirs @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.origin, dirs.shape).copy()
    return RayBatch(origins, dirs, pix)


def sample_ray_points(rays: RayBatch, near: float, far: float, n_samples: int,
                      mode: str = "midpoint", seed: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> RayPointBatch:
    """Sample ``n_samples`` points per ray in equal-width depth bins over [near, far).

    ``midpoint`` takes bin centers; ``stratified`` draws one uniform sample per
    bin from ``rng`` (or a generator seeded with ``seed``).
    """
    if not 0 <= near < far:
        raise DomainError(f"need 0 <= near < far, got near={near}, far={far}")
    if n_samples < 1:
        raise DomainError(f"n_samples must be >= 1, got {n_samples}")
    n_rays = len(rays)
    width = (far - near) / n_samples
    lower = near + width * np.arange(n_samples)
    if mode == "midpoint":
        t = np.broadcast_to(lower + 0.5 * width, (n_rays, n_samples)).copy()
    elif mode == "stratified":
        if rng is None:
            if seed is None:
                raise DomainError("stratified sampling needs a seed or generator")
            rng = np.random.default_rng(seed)
        t = lower + width * rng.random((n_rays, n_samples))
        # guard against rounding onto the upper edge
        upper = np.append(lower[1:], far)
        t = np.minimum(t, np.nextafter(upper, -np.inf))
    else:
        raise DomainError(f"unknown sampling mode {mode!r}")
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    deltas[:, -1] = far - t[:, -1]
    xyz = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    dirs = np.broadcast_to(rays.directions[:, None, :], xyz.shape)
    points = np.concatenate([xyz, dirs], axis=-1)
    return RayPointBatch(points, t, deltas)

