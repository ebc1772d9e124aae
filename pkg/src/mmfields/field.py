"""Dense voxel grids holding density, color, and two semantic feature branches.

All four grids live on the same lattice: grid point (i, j, k) sits at
``bbox_min + (i, j, k) * voxel_size`` with ``voxel_size = extent / (res - 1)``,
so the lattice corners coincide with the bounding box corners. Queries
trilinearly interpolate the raw (pre-activation) values of the 8 surrounding
grid points and then apply the activation: softplus for density, sigmoid for
color, identity for both feature branches. Points outside the box return
density 0, color 0, zero features, and an empty footprint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "CapacityError",
    "FieldConfig",
    "FieldSample",
    "VoxelFieldSet",
    "create_field",
    "sample_point",
    "interp_weights",
    "interp_matrix",
    "softplus",
    "softplus_grad",
    "inv_softplus",
    "sigmoid",
    "sigmoid_grad",
    "inv_sigmoid",
]

GRID_NAMES = ("density", "color", "feat_v", "feat_l")

# Cap on total scalars across the four grids; beyond this we refuse rather
# than letting numpy attempt a hopeless allocation.
MAX_FIELD_SCALARS = 2**31

# Fixed corner order for trilinear footprints: offsets in (dx, dy, dz).
_CORNERS = np.array(
    [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1], [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]],
    dtype=np.int64,
)


class CapacityError(RuntimeError):
    """Requested grid would exceed the supported in-memory size."""


def softplus(x):
    x = np.asarray(x)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def softplus_grad(x):
    return sigmoid(x)


def inv_softplus(y):
    # softplus is a bijection onto (0, inf); this form stays finite for any
    # positive y and keeps small y accurate.
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("inverse softplus needs positive input")
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def inv_sigmoid(p, clamp: float = 1e-6):
    p = np.clip(np.asarray(p, dtype=np.float64), clamp, 1.0 - clamp)
    return np.log(p / (1.0 - p))


@dataclass(frozen=True)
class FieldConfig:
    """Lattice geometry and channel sizes for one field set."""

    resolution: tuple[int, int, int]
    bbox_min: tuple[float, float, float]
    bbox_max: tuple[float, float, float]
    d_v: int = 64
    d_l: int = 64
    density_init: float = -2.0
    color_init: float = 0.0

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolution)
        bmin = tuple(float(v) for v in self.bbox_min)
        bmax = tuple(float(v) for v in self.bbox_max)
        if len(res) != 3 or any(r < 2 for r in res):
            raise ValueError("resolution must be three values >= 2")
        if len(bmin) != 3 or len(bmax) != 3 or any(a >= b for a, b in zip(bmin, bmax)):
            raise ValueError("bbox_min must be strictly below bbox_max componentwise")
        if self.d_v < 1 or self.d_l < 1:
            raise ValueError("feature dimensions must be >= 1")
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "bbox_min", bmin)
        object.__setattr__(self, "bbox_max", bmax)

    @property
    def n_voxels(self) -> int:
        r = self.resolution
        return r[0] * r[1] * r[2]

    @property
    def voxel_size(self) -> np.ndarray:
        res = np.array(self.resolution, dtype=np.float64)
        return (np.array(self.bbox_max) - np.array(self.bbox_min)) / (res - 1.0)

    def grid_shape(self, name: str) -> tuple[int, ...]:
        channels = {"density": (), "color": (3,), "feat_v": (self.d_v,), "feat_l": (self.d_l,)}
        return self.resolution + channels[name]


@dataclass
class VoxelFieldSet:
    """The four grids of one scene. Raw values; activations applied on sampling."""

    config: FieldConfig
    density_raw: np.ndarray
    color_raw: np.ndarray
    feat_v: np.ndarray
    feat_l: np.ndarray

    def __post_init__(self):
        for name in GRID_NAMES:
            arr = self.grids()[name]
            want = self.config.grid_shape(name)
            if arr.shape != want:
                raise ValueError(f"grid {name} has shape {arr.shape}, expected {want}")

    def grids(self) -> dict[str, np.ndarray]:
        return {
            "density": self.density_raw,
            "color": self.color_raw,
            "feat_v": self.feat_v,
            "feat_l": self.feat_l,
        }

    def set_grid(self, name: str, arr: np.ndarray) -> None:
        want = self.config.grid_shape(name)
        if arr.shape != want:
            raise ValueError(f"grid {name} has shape {arr.shape}, expected {want}")
        setattr(self, {"density": "density_raw", "color": "color_raw"}.get(name, name), arr)

    def copy(self) -> "VoxelFieldSet":
        return VoxelFieldSet(
            config=self.config,
            density_raw=self.density_raw.copy(),
            color_raw=self.color_raw.copy(),
            feat_v=self.feat_v.copy(),
            feat_l=self.feat_l.copy(),
        )

    def astype(self, dtype) -> "VoxelFieldSet":
        return VoxelFieldSet(
            config=self.config,
            density_raw=self.density_raw.astype(dtype),
            color_raw=self.color_raw.astype(dtype),
            feat_v=self.feat_v.astype(dtype),
            feat_l=self.feat_l.astype(dtype),
        )


def create_field(config: FieldConfig, dtype=np.float32) -> VoxelFieldSet:
    """Allocate grids at their init values (features start at zero)."""
    total = config.n_voxels * (1 + 3 + config.d_v + config.d_l)
    if total > MAX_FIELD_SCALARS:
        raise CapacityError(
            f"field would hold {total} scalars (> {MAX_FIELD_SCALARS}); reduce resolution or dims"
        )
    res = config.resolution
    return VoxelFieldSet(
        config=config,
        density_raw=np.full(res, config.density_init, dtype=dtype),
        color_raw=np.full(res + (3,), config.color_init, dtype=dtype),
        feat_v=np.zeros(res + (config.d_v,), dtype=dtype),
        feat_l=np.zeros(res + (config.d_l,), dtype=dtype),
    )


def interp_weights(config: FieldConfig, pts: np.ndarray):
    """Trilinear footprints for a batch of points.

    Returns (corner_idx, weights, inbounds): corner_idx (N, 8) flat grid
    indices, weights (N, 8) summing to 1 for in-bounds rows and to 0 for
    out-of-bounds rows. Points on the bbox boundary count as in-bounds.
    """
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    bmin = np.array(config.bbox_min)
    bmax = np.array(config.bbox_max)
    res = np.array(config.resolution, dtype=np.int64)
    inb = np.all((pts >= bmin) & (pts <= bmax), axis=1)

    u = (pts - bmin) / config.voxel_size
    base = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
    frac = np.clip(u - base, 0.0, 1.0)

    corner = base[:, None, :] + _CORNERS[None, :, :]  # (N, 8, 3)
    w = np.where(_CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    weights = w.prod(axis=2)
    weights[~inb] = 0.0
    flat = (corner[..., 0] * res[1] + corner[..., 1]) * res[2] + corner[..., 2]
    flat[~inb] = 0
    return flat, weights, inb


def interp_matrix(config: FieldConfig, pts: np.ndarray, dtype=np.float64):
    """Sparse (N, n_voxels) gather matrix: ``M @ grid.reshape(V, C)`` interpolates.

    Its transpose scatters per-point gradients back onto the lattice.
    """
    flat, weights, inb = interp_weights(config, pts)
    n = pts.shape[0]
    indptr = np.arange(0, 8 * n + 1, 8)
    mat = sp.csr_matrix(
        (weights.ravel().astype(dtype), flat.ravel(), indptr), shape=(n, config.n_voxels)
    )
    return mat, inb


@dataclass(frozen=True)
class FieldSample:
    """Activated values at one query point plus its interpolation footprint."""

    sigma: float
    color: np.ndarray
    f_v: np.ndarray
    f_l: np.ndarray
    footprint_indices: np.ndarray  # (8, 3) grid coords, empty when out of bounds
    footprint_weights: np.ndarray  # (8,), empty when out of bounds


def sample_point(field: VoxelFieldSet, x) -> FieldSample:
    """Interpolate raw grids at world point ``x`` and apply activations."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape != (3,):
        raise ValueError(f"query point must be a 3-vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("query point must be finite")
    cfg = field.config
    flat, weights, inb = interp_weights(cfg, x[None, :])
    if not inb[0]:
        return FieldSample(
            sigma=0.0,
            color=np.zeros(3),
            f_v=np.zeros(cfg.d_v),
            f_l=np.zeros(cfg.d_l),
            footprint_indices=np.empty((0, 3), dtype=np.int64),
            footprint_weights=np.empty(0),
        )
    w = weights[0]
    idx = flat[0]
    density = float(w @ field.density_raw.reshape(-1)[idx])
    color_raw = w @ field.color_raw.reshape(-1, 3)[idx]
    f_v = w @ field.feat_v.reshape(-1, cfg.d_v)[idx]
    f_l = w @ field.feat_l.reshape(-1, cfg.d_l)[idx]
    res = cfg.resolution
    ijk = np.stack(np.unravel_index(idx, res), axis=1)
    return FieldSample(
        sigma=float(softplus(density)),
        color=sigmoid(color_raw.astype(np.float64)),
        f_v=f_v.astype(np.float64),
        f_l=f_l.astype(np.float64),
        footprint_indices=ijk,
        footprint_weights=w,
    )
