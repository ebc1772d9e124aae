"""Open-vocabulary decomposition of trained fields.

Queries compare a unit embedding against the per-voxel feature grids by
cosine similarity; thresholding the similarity volume yields a 3D region mask
that drives the edit operations (extract, delete, recolor). Edits work on raw
grid values, so an edited field renders through the unchanged pipeline.

Query embeddings are canonicalized (normalized in float64, stored float32),
which makes masks bit-identical under positive rescaling of the input
embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import VoxelFieldSet, inv_sigmoid, inv_softplus, softplus
from .geometry import CameraModel, pixel_grid_rays
from .renderer import composite_weights, make_ray_bundle

__all__ = [
    "DegenerateQueryError",
    "Query",
    "TRANSPARENT_RAW_DENSITY",
    "patch_query_feature",
    "similarity_volume",
    "region_mask",
    "EditOp",
    "apply_edit",
    "relevancy_map",
    "kmeans_segment",
]

# raw density value whose activated density is 1e-6: close enough to empty
# that an edited-away region contributes no visible radiance
TRANSPARENT_RAW_DENSITY = float(inv_softplus(np.float64(1e-6)))

_MODALITIES = ("visual", "language")


class DegenerateQueryError(ValueError):
    """The query embedding has (numerically) zero norm."""


@dataclass(frozen=True, eq=False)
class Query:
    """A canonicalized similarity query.

    ``embedding`` is stored unit-norm float32 regardless of the scale of the
    input, so any positive multiple of a vector produces bit-identical
    downstream masks. ``threshold`` is the cosine above which (inclusive) a
    voxel counts as selected.
    """

    embedding: np.ndarray
    threshold: float = 0.8

    def __post_init__(self):
        vec = np.asarray(self.embedding, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(vec)):
            raise DegenerateQueryError("query embedding must be finite")
        norm = np.linalg.norm(vec)
        if norm < 1e-12:
            raise DegenerateQueryError("query embedding has zero norm")
        object.__setattr__(self, "embedding", (vec / norm).astype(np.float32))
        object.__setattr__(self, "threshold", float(self.threshold))
        if not -1.0 < self.threshold <= 1.0:
            raise ValueError("threshold must lie in (-1, 1]")


def patch_query_feature(feature_map: np.ndarray, rect) -> np.ndarray:
    """Mean feature over a half-open pixel rect (x0, y0, x1, y1), normalized.

    The rect indexes a rendered or teacher feature map; the averaged vector is
    the query embedding a user gets by dragging a box over a view.
    """
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim != 3:
        raise ValueError("feature map must be (H, W, C)")
    h, w = fm.shape[:2]
    x0, y0, x1, y1 = (int(v) for v in rect)
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise ValueError(f"rect {rect!r} out of bounds for {w}x{h} map")
    mean = fm[y0:y1, x0:x1].mean(axis=(0, 1))
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise DegenerateQueryError("patch features cancel to zero")
    return mean / norm


def _feature_grid(field: VoxelFieldSet, modality: str) -> np.ndarray:
    if modality not in _MODALITIES:
        raise ValueError(f"modality must be one of {_MODALITIES}")
    return field.feat_v if modality == "visual" else field.feat_l


def similarity_volume(
    field: VoxelFieldSet, query: Query, modality: str = "language"
) -> np.ndarray:
    """Cosine between the query and every voxel's feature (zero-norm -> 0)."""
    grid = _feature_grid(field, modality).astype(np.float64)
    if grid.shape[-1] != query.embedding.size:
        raise ValueError(
            f"query dim {query.embedding.size} does not match field dim {grid.shape[-1]}"
        )
    norms = np.linalg.norm(grid, axis=-1)
    dots = grid @ query.embedding.astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = np.where(norms < 1e-12, 0.0, dots / np.where(norms < 1e-12, 1.0, norms))
    return sims


def region_mask(
    field: VoxelFieldSet, query: Query, modality: str = "language"
) -> np.ndarray:
    """Boolean voxel mask: similarity >= query.threshold."""
    return similarity_volume(field, query, modality) >= query.threshold


@dataclass(frozen=True)
class EditOp:
    """A declarative edit: keep (extract), remove (delete), or recolor the
    region selected by ``query`` in the chosen feature modality."""

    kind: str
    query: Query
    modality: str = "language"
    color: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("extract", "delete", "recolor"):
            raise ValueError("kind must be extract, delete, or recolor")
        if self.modality not in _MODALITIES:
            raise ValueError(f"modality must be one of {_MODALITIES}")
        if self.kind == "recolor":
            if self.color is None or len(self.color) != 3:
                raise ValueError("recolor needs an RGB color")
            if not all(0.0 <= c <= 1.0 for c in self.color):
                raise ValueError("recolor color must lie in [0, 1]")
        elif self.color is not None:
            raise ValueError(f"{self.kind} does not take a color")


def apply_edit(field: VoxelFieldSet, op: EditOp) -> VoxelFieldSet:
    """Return an edited copy of the field; the input is left untouched.

    extract: density outside the region becomes transparent.
    delete:  density inside the region becomes transparent.
    recolor: raw color inside the region is set so the activated color equals
             ``op.color``; geometry and features are unchanged.
    """
    mask = region_mask(field, op.query, op.modality)
    out = field.copy()
    if op.kind == "extract":
        out.density_raw[~mask] = TRANSPARENT_RAW_DENSITY
    elif op.kind == "delete":
        out.density_raw[mask] = TRANSPARENT_RAW_DENSITY
    else:
        clamped = np.clip(np.asarray(op.color, dtype=np.float64), 1e-6, 1.0 - 1e-6)
        out.color_raw[mask] = inv_sigmoid(clamped).astype(out.color_raw.dtype)
    return out


def relevancy_map(
    field: VoxelFieldSet,
    camera: CameraModel,
    query: Query,
    modality: str = "language",
    n_samples: int = 64,
    near: float = 0.0,
    far: float = np.inf,
    chunk: int = 8192,
) -> np.ndarray:
    """Render per-pixel relevancy: alpha-composited cosine similarity.

    Per sample the interpolated feature is normalized and compared to the
    query; the scalar similarities composite with the same weights as color,
    so empty space contributes nothing and occlusion is respected.
    """
    grid = _feature_grid(field, modality).astype(np.float64)
    d = grid.shape[-1]
    if d != query.embedding.size:
        raise ValueError("query dimension does not match the field")
    flat_feat = grid.reshape(-1, d)
    flat_sigma_raw = field.density_raw.astype(np.float64).reshape(-1)
    q = query.embedding.astype(np.float64)
    origins, dirs = pixel_grid_rays(camera)
    n = origins.shape[0]
    out = np.empty(n, dtype=np.float64)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        bundle = make_ray_bundle(
            field.config, origins[lo:hi], dirs[lo:hi], n_samples, None, near, far
        )
        feats = bundle.gather @ flat_feat
        norms = np.linalg.norm(feats, axis=-1)
        sims = np.where(norms < 1e-12, 0.0, (feats @ q) / np.where(norms < 1e-12, 1.0, norms))
        sigma = softplus(bundle.gather @ flat_sigma_raw).reshape(bundle.n_rays, -1)
        _, _, weight, _, _ = composite_weights(sigma, bundle.delta)
        out[lo:hi] = (weight * sims.reshape(bundle.n_rays, -1)).sum(axis=1)
    return out.reshape(camera.height, camera.width)


def kmeans_segment(
    features: np.ndarray, k: int, seed: int = 0, n_iter: int = 100, tol: float = 1e-6
) -> np.ndarray:
    """Cluster feature vectors with k-means (k-means++ seeding, Lloyd steps).

    Accepts (..., D) and returns integer labels with the leading shape.
    Deterministic for fixed inputs and seed; ties in assignment go to the
    lowest cluster index; an emptied cluster is reseeded at the point
    farthest from its current centroid.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim < 2:
        raise ValueError("features must be (..., D)")
    lead = feats.shape[:-1]
    x = feats.reshape(-1, feats.shape[-1])
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:  # all remaining points coincide with a centroid
            centroids[j:] = centroids[0]
            break
        centroids[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))

    for _ in range(n_iter):
        dist = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
        labels = np.argmin(dist, axis=1)
        new = centroids.copy()
        for j in range(k):
            sel = labels == j
            if sel.any():
                new[j] = x[sel].mean(axis=0)
            else:
                new[j] = x[np.argmax(dist[np.arange(n), labels])]
        shift = float(np.abs(new - centroids).max())
        centroids = new
        if shift < tol:
            break
    dist = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(dist, axis=1).astype(np.int32).reshape(lead)
