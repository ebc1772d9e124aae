"""Pinhole cameras, ray generation, and stratified sampling along rays.

Conventions, shared with the dataset format and the synthetic tracer: cameras
look along -z in camera space (right-handed), image x grows right, image y
grows down, and a ray for pixel (px, py) passes through the pixel center
(px + 0.5, py + 0.5). Everything here is pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CameraModel",
    "Ray",
    "SegmentSet",
    "generate_ray",
    "sample_segments",
    "pixel_grid_rays",
    "look_at_pose",
]

_ORTHO_TOL = 1e-6
_UNIT_TOL = 1e-6


def _check_vec(x, n: int, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {np.shape(x)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera; ``pose`` is the 4x4 row-major camera-to-world transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got {pose.shape}")
        if not np.all(np.isfinite(pose)):
            raise ValueError("pose must be finite")
        rot = pose[:3, :3]
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("pose rotation block is not orthonormal")
        object.__setattr__(self, "pose", pose)

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.pose[:3, 3]


@dataclass(frozen=True)
class Ray:
    """A world-space ray with unit direction and a [near, far) sampling range."""

    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        origin = _check_vec(self.origin, 3, "origin")
        direction = np.asarray(self.direction, dtype=np.float64).reshape(-1)
        if direction.shape != (3,) or not np.all(np.isfinite(direction)):
            raise ValueError("direction must be a finite 3-vector")
        if abs(np.linalg.norm(direction) - 1.0) > _UNIT_TOL:
            raise ValueError("direction must be unit length")
        if not (0.0 <= self.near < self.far):
            raise ValueError(f"need 0 <= near < far, got near={self.near} far={self.far}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    def point_at(self, t) -> np.ndarray:
        return self.origin + np.multiply.outer(np.asarray(t, dtype=np.float64), self.direction)


@dataclass(frozen=True)
class SegmentSet:
    """Midpoints and lengths of the quadrature segments along one ray."""

    t_mid: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        t_mid = np.asarray(self.t_mid, dtype=np.float64).reshape(-1)
        delta = np.asarray(self.delta, dtype=np.float64).reshape(-1)
        if t_mid.shape != delta.shape:
            raise ValueError("t_mid and delta must have the same length")
        if t_mid.size and np.any(np.diff(t_mid) <= 0):
            raise ValueError("t_mid must be strictly increasing")
        if np.any(delta <= 0):
            raise ValueError("segment lengths must be positive")
        object.__setattr__(self, "t_mid", t_mid)
        object.__setattr__(self, "delta", delta)

    def __len__(self) -> int:
        return self.t_mid.size


def generate_ray(camera: CameraModel, px, near: float = 0.0, far: float = np.inf) -> Ray:
    """Ray through the center of (sub)pixel ``px`` = (x, y), in world space.

    ``px`` may be fractional; it must lie in [0, width) x [0, height).
    """
    x, y = float(px[0]), float(px[1])
    if not (0.0 <= x < camera.width and 0.0 <= y < camera.height):
        raise ValueError(f"pixel ({x}, {y}) outside [0, {camera.width}) x [0, {camera.height})")
    d_cam = np.array(
        [
            (x + 0.5 - camera.cx) / camera.fx,
            -(y + 0.5 - camera.cy) / camera.fy,
            -1.0,
        ]
    )
    d_world = camera.rotation @ d_cam
    d_world = d_world / np.linalg.norm(d_world)
    return Ray(origin=camera.origin.copy(), direction=d_world, near=near, far=far)


def sample_segments(ray: Ray, n: int, jitter: bool = False, rng_seed: int = 0) -> SegmentSet:
    """Split [near, far) into ``n`` equal bins; midpoint or jittered sample per bin.

    Jitter draws one uniform per bin from ``default_rng(rng_seed)``, so results
    are reproducible for a fixed seed.
    """
    if n < 1:
        raise ValueError("need at least one segment")
    if not np.isfinite(ray.far):
        raise ValueError("sampling requires a finite far bound")
    edges = np.linspace(ray.near, ray.far, n + 1)
    lo, hi = edges[:-1], edges[1:]
    if jitter:
        u = np.random.default_rng(rng_seed).uniform(size=n)
    else:
        u = np.full(n, 0.5)
    return SegmentSet(t_mid=lo + u * (hi - lo), delta=hi - lo)


def pixel_grid_rays(camera: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for every pixel center, row-major.

    Returns (origins, directions), each (height * width, 3); row i corresponds
    to pixel (i % width, i // width).
    """
    xs = (np.arange(camera.width) + 0.5 - camera.cx) / camera.fx
    ys = -(np.arange(camera.height) + 0.5 - camera.cy) / camera.fy
    gx, gy = np.meshgrid(xs, ys)
    d_cam = np.stack([gx, gy, -np.ones_like(gx)], axis=-1).reshape(-1, 3)
    d_world = d_cam @ camera.rotation.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.origin, d_world.shape).copy()
    return origins, d_world


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose looking from ``eye`` toward ``target`` (-z forward)."""
    eye = _check_vec(eye, 3, "eye")
    target = _check_vec(target, 3, "target")
    up = _check_vec(up, 3, "up")
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    forward /= norm
    right = np.cross(forward, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-12:
        raise ValueError("view direction is parallel to up")
    right /= rnorm
    true_up = np.cross(right, forward)
    pose = np.eye(4)
    # Columns map camera axes (x right, y up, z backward) into world space.
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = -forward
    pose[:3, 3] = eye
    return pose
