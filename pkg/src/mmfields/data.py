"""Datasets: on-disk scene format, synthetic generation, teachers, PCA.

A scene directory looks like::

    scene.json                   cameras, near/far, splits, label table, extras
    images/frame_%04d.png        8-bit RGB ground-truth renders
    features/vis_%04d.bin        visual teacher maps, one per view
    features/lang_%04d.bin       language teacher maps
    masks/obj%02d_%04d.png       optional 0/255 object masks (first-hit)

Feature maps are little-endian binaries: magic ``M2DF``, u32 version (1),
u32 H, W, C, then H*W*C float32 values, row-major with channels fastest.
Checkpoints are ``M2DC`` + version + the field configuration + the four grids
as float32 in density/color/feat_v/feat_l order.

The synthetic generator raytraces flat-shaded primitives with supersampling
for ground truth, renders exact per-pixel id maps for masks and teachers, and
builds a label embedding table in which foreground labels share a common
direction and background labels another, orthogonal one; each label then gets
its own orthogonal offset. That structure mirrors distilled feature models:
same-group concepts are similar but separable, across-group ones are not.
The language teacher can be block-coarsened and carries independent noise,
imitating the coarse, noisy maps of a text-aligned encoder; the visual
teacher is sharp and lightly noised.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image

from .field import FieldConfig, VoxelFieldSet
from .geometry import CameraModel, look_at_pose, pixel_grid_rays

__all__ = [
    "FormatError",
    "LabelEmbeddingTable",
    "PcaBasis",
    "pca_reduce",
    "apply_pca",
    "write_feature_map",
    "read_feature_map",
    "save_checkpoint",
    "load_checkpoint",
    "SceneDataset",
    "save_dataset",
    "load_dataset",
    "PrimitiveSpec",
    "SyntheticSceneSpec",
    "generate_synthetic_scene",
    "NearestColorExtractor",
]

_FEATURE_MAGIC = b"M2DF"
_CKPT_MAGIC = b"M2DC"
_VERSION = 1


class FormatError(RuntimeError):
    """A file does not conform to the expected binary or JSON layout."""


# ---------------------------------------------------------------------------
# Label embeddings


class LabelEmbeddingTable:
    """Mapping from label strings to unit-norm embedding vectors."""

    def __init__(self, table: dict):
        if not table:
            raise ValueError("label table must not be empty")
        dims = set()
        self._table = {}
        for label, vec in table.items():
            arr = np.asarray(vec, dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"embedding for '{label}' is not finite")
            if abs(np.linalg.norm(arr) - 1.0) > 1e-6:
                raise ValueError(f"embedding for '{label}' is not unit norm")
            dims.add(arr.size)
            self._table[str(label)] = arr
        if len(dims) != 1:
            raise ValueError("all label embeddings must share one dimension")
        self._dim = dims.pop()

    @property
    def labels(self) -> list:
        return list(self._table)

    @property
    def dim(self) -> int:
        return self._dim

    def __contains__(self, label) -> bool:
        return label in self._table

    def get(self, label: str) -> np.ndarray:
        if label not in self._table:
            known = ", ".join(sorted(self._table))
            raise LookupError(f"unknown label '{label}' (known labels: {known})")
        return self._table[label].copy()

    def as_dict(self) -> dict:
        return {k: v.tolist() for k, v in self._table.items()}


# ---------------------------------------------------------------------------
# PCA reduction for teacher ingestion


@dataclass(frozen=True)
class PcaBasis:
    mean: np.ndarray  # (D,)
    components: np.ndarray  # (D, T), orthonormal columns (zero past the rank)


def pca_reduce(features: np.ndarray, target_d: int):
    """L2-normalize rows, center, and project onto the top principal axes.

    Deterministic: components are ordered by descending eigenvalue and signed
    so their largest-magnitude entry is positive; directions past the rank of
    the data are zero-filled. Returns (reduced (N, target_d), basis).
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError("features must be (N, D)")
    n, d = feats.shape
    if not 1 <= target_d <= d:
        raise ValueError(f"target_d must be in [1, {d}]")
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    normed = feats / np.where(norms < 1e-12, 1.0, norms)
    mean = normed.mean(axis=0)
    centered = normed - mean
    cov = centered.T @ centered / n
    eigval, eigvec = np.linalg.eigh(cov)
    order = np.argsort(eigval)[::-1][:target_d]
    components = eigvec[:, order].copy()
    eigval = eigval[order]
    rank_tol = max(1e-12, 1e-10 * float(eigval[0])) if eigval.size else 1e-12
    for j in range(components.shape[1]):
        if eigval[j] <= rank_tol:
            components[:, j] = 0.0
            continue
        lead = np.argmax(np.abs(components[:, j]))
        if components[lead, j] < 0:
            components[:, j] = -components[:, j]
    basis = PcaBasis(mean=mean, components=components)
    return centered @ components, basis


def apply_pca(features: np.ndarray, basis: PcaBasis) -> np.ndarray:
    """Project new rows with an existing basis (same normalize-center steps)."""
    feats = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=-1, keepdims=True)
    normed = feats / np.where(norms < 1e-12, 1.0, norms)
    return (normed - basis.mean) @ basis.components


# ---------------------------------------------------------------------------
# Binary feature maps


def write_feature_map(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise ValueError("feature map must be (H, W, C)")
    h, w, c = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIII", _FEATURE_MAGIC, _VERSION, h, w, c))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_feature_map(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    head = struct.calcsize("<4sIIII")
    if len(raw) < head:
        raise FormatError(f"{path}: truncated feature map header")
    magic, version, h, w, c = struct.unpack_from("<4sIIII", raw)
    if magic != _FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    want = head + h * w * c * 4
    if len(raw) != want:
        raise FormatError(f"{path}: expected {want} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=head).reshape(h, w, c).copy()


# ---------------------------------------------------------------------------
# Checkpoints

_CKPT_HEAD = "<4sI3I3d3dII2d"


def save_checkpoint(field: VoxelFieldSet, path) -> None:
    cfg = field.config
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(
            struct.pack(
                _CKPT_HEAD,
                _CKPT_MAGIC,
                _VERSION,
                *cfg.resolution,
                *cfg.bbox_min,
                *cfg.bbox_max,
                cfg.d_v,
                cfg.d_l,
                cfg.density_init,
                cfg.color_init,
            )
        )
        for name in ("density", "color", "feat_v", "feat_l"):
            fh.write(np.ascontiguousarray(field.grids()[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> VoxelFieldSet:
    path = Path(path)
    raw = path.read_bytes()
    head = struct.calcsize(_CKPT_HEAD)
    if len(raw) < head:
        raise FormatError(f"{path}: truncated checkpoint header")
    fields = struct.unpack_from(_CKPT_HEAD, raw)
    magic, version = fields[0], fields[1]
    if magic != _CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    res = fields[2:5]
    bbox_min, bbox_max = fields[5:8], fields[8:11]
    d_v, d_l = fields[11], fields[12]
    density_init, color_init = fields[13], fields[14]
    cfg = FieldConfig(
        resolution=res, bbox_min=bbox_min, bbox_max=bbox_max, d_v=d_v, d_l=d_l,
        density_init=density_init, color_init=color_init,
    )
    v = cfg.n_voxels
    counts = {"density": v, "color": 3 * v, "feat_v": cfg.d_v * v, "feat_l": cfg.d_l * v}
    want = head + 4 * sum(counts.values())
    if len(raw) != want:
        raise FormatError(f"{path}: expected {want} bytes, found {len(raw)}")
    offset = head
    grids = {}
    for name, cnt in counts.items():
        grids[name] = (
            np.frombuffer(raw, dtype="<f4", count=cnt, offset=offset)
            .reshape(cfg.grid_shape(name))
            .copy()
        )
        offset += 4 * cnt
    return VoxelFieldSet(
        config=cfg,
        density_raw=grids["density"],
        color_raw=grids["color"],
        feat_v=grids["feat_v"],
        feat_l=grids["feat_l"],
    )


# ---------------------------------------------------------------------------
# Scene dataset


class NearestColorExtractor:
    """Patch feature extractor: maps each pixel to the embedding of the known
    scene color nearest to it. Piecewise constant, so it acts as a fixed
    appearance teacher rather than a differentiable function."""

    def __init__(self, colors: np.ndarray, embeddings: np.ndarray):
        self.colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        if self.embeddings.shape[0] != self.colors.shape[0]:
            raise ValueError("need one embedding per color")

    def __call__(self, rgb: np.ndarray) -> np.ndarray:
        rgb = np.asarray(rgb, dtype=np.float64)
        d2 = np.sum((rgb[..., None, :] - self.colors) ** 2, axis=-1)
        return self.embeddings[np.argmin(d2, axis=-1)]


@dataclass
class SceneDataset:
    """A loaded (or generated) scene: cameras, images, teachers, GT extras."""

    cameras: list
    images: list  # (H, W, 3) float32 in [0, 1]
    teacher_v: list | None
    teacher_l: list | None
    near: float
    far: float
    train_views: list
    test_views: list
    label_table: LabelEmbeddingTable | None = None
    objects: list | None = None  # [{label, color, kind}], mask file order
    fg_labels: list = dc_field(default_factory=list)
    background_label: str = "background"
    background_color: tuple = (0.0, 0.0, 0.0)
    bbox_min: tuple | None = None
    bbox_max: tuple | None = None
    masks: dict | None = None  # label -> list of (H, W) bool per view
    root: Path | None = None

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def image_size(self) -> tuple:
        return self.images[0].shape[1], self.images[0].shape[0]  # (W, H)

    @property
    def patch_extractor(self):
        if self.objects is None or self.label_table is None:
            return None
        colors = [o["color"] for o in self.objects] + [self.background_color]
        embeds = [self.label_table.get(o["label"]) for o in self.objects]
        embeds.append(self.label_table.get(self.background_label))
        return NearestColorExtractor(np.array(colors), np.stack(embeds))


def _camera_to_json(cam: CameraModel) -> dict:
    return {
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "camera_to_world": [float(x) for x in cam.pose.reshape(-1)],
    }


def _camera_from_json(d: dict) -> CameraModel:
    pose = np.array(d["camera_to_world"], dtype=np.float64)
    if pose.size != 16:
        raise FormatError("camera_to_world must hold 16 values (row-major 4x4)")
    return CameraModel(
        fx=float(d["fx"]),
        fy=float(d["fy"]),
        cx=float(d["cx"]),
        cy=float(d["cy"]),
        width=int(d["width"]),
        height=int(d["height"]),
        pose=pose.reshape(4, 4),
    )


def _save_png(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255.0)


def save_dataset(ds: SceneDataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "m2d-scene",
        "version": _VERSION,
        "near": ds.near,
        "far": ds.far,
        "cameras": [_camera_to_json(c) for c in ds.cameras],
        "train_views": list(map(int, ds.train_views)),
        "test_views": list(map(int, ds.test_views)),
        "fg_labels": ds.fg_labels,
        "background_label": ds.background_label,
        "background_color": list(ds.background_color),
    }
    if ds.label_table is not None:
        meta["label_table"] = ds.label_table.as_dict()
    if ds.objects is not None:
        meta["objects"] = ds.objects
    if ds.bbox_min is not None:
        meta["bbox_min"] = list(ds.bbox_min)
        meta["bbox_max"] = list(ds.bbox_max)
    with open(root / "scene.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    for i, img in enumerate(ds.images):
        _save_png(root / "images" / f"frame_{i:04d}.png", img)
    if ds.teacher_v is not None:
        for i, fm in enumerate(ds.teacher_v):
            write_feature_map(root / "features" / f"vis_{i:04d}.bin", fm)
    if ds.teacher_l is not None:
        for i, fm in enumerate(ds.teacher_l):
            write_feature_map(root / "features" / f"lang_{i:04d}.bin", fm)
    if ds.masks is not None and ds.objects is not None:
        for oi, obj in enumerate(ds.objects):
            views = ds.masks.get(obj["label"])
            if views is None:
                continue
            for vi, mask in enumerate(views):
                _save_png(root / "masks" / f"obj{oi:02d}_{vi:04d}.png", mask.astype(np.float32))


def load_dataset(path) -> SceneDataset:
    root = Path(path)
    meta_path = root / "scene.json"
    if not meta_path.exists():
        raise FormatError(f"{root}: no scene.json found")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{meta_path}: invalid JSON ({e})") from e
    if meta.get("format") != "m2d-scene":
        raise FormatError(f"{meta_path}: not a scene file")
    if meta.get("version") != _VERSION:
        raise FormatError(f"{meta_path}: unsupported version {meta.get('version')}")
    cameras = [_camera_from_json(c) for c in meta["cameras"]]
    n = len(cameras)
    images = []
    for i in range(n):
        p = root / "images" / f"frame_{i:04d}.png"
        if not p.exists():
            raise FormatError(f"missing image {p}")
        img = _load_png(p)
        cam = cameras[i]
        if img.shape[:2] != (cam.height, cam.width):
            raise FormatError(f"{p}: image is {img.shape[:2]}, camera says {(cam.height, cam.width)}")
        images.append(img)

    def load_maps(prefix):
        first = root / "features" / f"{prefix}_0000.bin"
        if not first.exists():
            return None
        maps = []
        for i in range(n):
            fm = read_feature_map(root / "features" / f"{prefix}_{i:04d}.bin")
            if fm.shape[:2] != images[i].shape[:2]:
                raise FormatError(f"feature map {prefix}_{i:04d}.bin does not match image size")
            maps.append(fm)
        return maps

    teacher_v = load_maps("vis")
    teacher_l = load_maps("lang")
    label_table = (
        LabelEmbeddingTable(meta["label_table"]) if "label_table" in meta else None
    )
    objects = meta.get("objects")
    masks = None
    if objects is not None and (root / "masks").exists():
        masks = {}
        for oi, obj in enumerate(objects):
            views = []
            complete = True
            for vi in range(n):
                p = root / "masks" / f"obj{oi:02d}_{vi:04d}.png"
                if not p.exists():
                    complete = False
                    break
                views.append(_load_png(p)[..., 0] > 0.5)
            if complete:
                masks[obj["label"]] = views
        if not masks:
            masks = None
    return SceneDataset(
        cameras=cameras,
        images=images,
        teacher_v=teacher_v,
        teacher_l=teacher_l,
        near=float(meta["near"]),
        far=float(meta["far"]),
        train_views=list(meta["train_views"]),
        test_views=list(meta["test_views"]),
        label_table=label_table,
        objects=objects,
        fg_labels=list(meta.get("fg_labels", [])),
        background_label=meta.get("background_label", "background"),
        background_color=tuple(meta.get("background_color", (0.0, 0.0, 0.0))),
        bbox_min=tuple(meta["bbox_min"]) if "bbox_min" in meta else None,
        bbox_max=tuple(meta["bbox_max"]) if "bbox_max" in meta else None,
        masks=masks,
        root=root,
    )


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass(frozen=True)
class PrimitiveSpec:
    """A primitive: ``size`` is a radius for spheres and half-extents (3,)
    for boxes.

    ``texture`` adds a smooth positional color modulation of that amplitude
    around the base color. Untextured objects leave surface geometry
    underdetermined (any soft density whose mixture matches the flat color
    renders equally well); a little texture makes multi-view consistency pin
    the surface down.
    """

    kind: str
    center: tuple
    size: object
    color: tuple
    label: str
    texture: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown primitive kind '{self.kind}'")
        if self.kind == "box" and len(tuple(np.atleast_1d(self.size))) != 3:
            raise ValueError("box size must be three half-extents")
        if self.texture < 0:
            raise ValueError("texture amplitude must be >= 0")

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "sphere":
            r = float(self.size)
            return c - r, c + r
        half = np.asarray(self.size, dtype=np.float64)
        return c - half, c + half


@dataclass
class SyntheticSceneSpec:
    """Everything needed to generate a scene deterministically (plus a seed)."""

    objects: list
    fg_labels: list | None = None  # default: every object label
    n_views: int = 25
    test_every: int = 5
    orbit_radius: float = 2.6
    orbit_elevation_deg: float = 35.0
    orbit_center: tuple = (0.0, 0.0, 0.25)
    arc_start_deg: float = 0.0
    arc_span_deg: float = 360.0
    width: int = 96
    height: int = 96
    focal: float | None = None
    embed_dim: int = 8
    noise_visual: float = 0.05
    noise_language: float = 0.15
    lang_block: int = 4
    supersample: int = 4
    bbox_margin: float = 0.1
    background_label: str = "background"

    def __post_init__(self):
        if not self.objects:
            raise ValueError("a scene needs at least one object")
        labels = [o.label for o in self.objects]
        if len(set(labels)) != len(labels):
            raise ValueError("object labels must be unique")
        if self.background_label in labels:
            raise ValueError("background label collides with an object label")
        if self.fg_labels is None:
            self.fg_labels = list(labels)
        if self.n_views < 1 or self.supersample < 1 or self.lang_block < 1:
            raise ValueError("n_views, supersample, and lang_block must be >= 1")
        if self.embed_dim % 2 or self.embed_dim < 2 * (len(labels) + 1):
            raise ValueError("embed_dim must be even and at least twice the label count")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        d["objects"] = [
            PrimitiveSpec(
                kind=o["kind"],
                center=tuple(o["center"]),
                size=o["size"] if np.isscalar(o["size"]) else tuple(o["size"]),
                color=tuple(o["color"]),
                label=o["label"],
                texture=o.get("texture", 0.0),
            )
            for o in d["objects"]
        ]
        return cls(**d)

    def scene_bounds(self):
        los, his = zip(*(o.bounds() for o in self.objects))
        lo = np.min(los, axis=0) - self.bbox_margin
        hi = np.max(his, axis=0) + self.bbox_margin
        return lo, hi

    @classmethod
    def desk(cls, **overrides) -> "SyntheticSceneSpec":
        """A small tabletop scene: ball and box on a ground slab, seen from a
        forward-facing arc (so the two objects never occlude each other)."""
        objects = [
            PrimitiveSpec(
                kind="sphere", center=(-0.33, -0.14, 0.42), size=0.3,
                color=(0.85, 0.25, 0.2), label="ball", texture=0.12,
            ),
            PrimitiveSpec(
                kind="box", center=(0.36, 0.15, 0.24), size=(0.25, 0.25, 0.24),
                color=(0.2, 0.45, 0.9), label="box", texture=0.12,
            ),
            PrimitiveSpec(
                kind="box", center=(0.0, 0.0, -0.06), size=(0.62, 0.62, 0.06),
                color=(0.5, 0.5, 0.42), label="ground", texture=0.12,
            ),
        ]
        kw = dict(
            objects=objects,
            fg_labels=["ball", "box"],
            arc_start_deg=67.0,
            arc_span_deg=90.0,
            bbox_margin=0.08,
        )
        kw.update(overrides)
        return cls(**kw)


def _trace_hits(spec: SyntheticSceneSpec, origins, dirs, t_max):
    """First-hit object index per ray; len(objects) means background."""
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_id = np.full(n, len(spec.objects), dtype=np.int32)
    eps = 1e-6
    for oi, obj in enumerate(spec.objects):
        if obj.kind == "sphere":
            c = np.asarray(obj.center)
            r = float(obj.size)
            oc = origins - c
            b = np.einsum("nd,nd->n", dirs, oc)
            q = np.einsum("nd,nd->n", oc, oc) - r * r
            disc = b * b - q
            hit = disc >= 0
            sq = np.sqrt(np.where(hit, disc, 0.0))
            t0 = -b - sq
            t1 = -b + sq
            t = np.where(t0 > eps, t0, t1)
            t = np.where(hit & (t > eps), t, np.inf)
        else:
            t = _box_entry(origins, dirs, *obj.bounds(), eps)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, oi, best_id)
    best_t = np.where(best_t > t_max, np.inf, best_t)
    best_id = np.where(np.isinf(best_t), len(spec.objects), best_id)
    return best_id, best_t


def _box_entry(origins, dirs, lo, hi, eps):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tlo = np.minimum(ta, tb)
    thi = np.maximum(ta, tb)
    par = dirs == 0.0
    if np.any(par):
        inside = (origins >= lo) & (origins <= hi)
        tlo = np.where(par, np.where(inside, -np.inf, np.inf), tlo)
        thi = np.where(par, np.where(inside, np.inf, -np.inf), thi)
    t_entry = tlo.max(axis=1)
    t_exit = thi.min(axis=1)
    ok = (t_exit >= t_entry) & (t_exit > eps)
    t = np.where(t_entry > eps, t_entry, t_exit)  # inside the box: exit face
    return np.where(ok, t, np.inf)


def _build_label_table(spec: SyntheticSceneSpec, rng) -> LabelEmbeddingTable:
    """Sign codes on the hypercube, scaled to unit norm.

    Background labels flip the first half of the coordinates (so the two
    groups are near-orthogonal); each label additionally flips its own small
    set of coordinates, disjoint across labels and balanced across the two
    halves, giving within-group cosine (d - 4m)/d and cross-group cosine
    within 2m/d of zero. Uniform per-coordinate magnitude matters: grid
    features train by per-coordinate adaptive steps, which converge to the
    target's sign pattern long before its exact profile.
    """
    labels = [o.label for o in spec.objects] + [spec.background_label]
    fg = set(spec.fg_labels)
    d = spec.embed_dim
    m = max(1, min(d // 8, d // len(labels)))
    half = d // 2
    # popped lowest-index first; a label starts in its group's home half so
    # that odd flip counts cancel between any foreground/background pair
    pools = {0: list(range(half))[::-1], 1: list(range(half, d))[::-1]}
    codes = np.ones((len(labels), d))
    codes[[label not in fg for label in labels], :half] = -1.0
    for i, label in enumerate(labels):
        home = 0 if label in fg else 1
        for j in range(m):
            want = (home + j) % 2
            pool = pools[want] or pools[1 - want]
            codes[i, pool.pop()] *= -1.0
    # a shared sign mask and coordinate shuffle leave all inner products alone
    sign = rng.choice([-1.0, 1.0], size=d)
    perm = rng.permutation(d)
    codes = (codes * sign)[:, perm] / np.sqrt(d)
    return LabelEmbeddingTable(dict(zip(labels, codes)))


# one fixed low-frequency wave per color channel (cycles per scene unit);
# wavelengths stay well above typical voxel sizes so a 64-wide color grid
# can represent the pattern
_TEXTURE_FREQ = np.array(
    [[3.1, 1.7, 2.3], [1.9, 3.3, 1.1], [2.7, 0.9, 3.7]]
)
_TEXTURE_PHASE = np.array([0.0, 2.1, 4.2])


def _hit_colors(spec: SyntheticSceneSpec, origins, dirs, ids, ts) -> np.ndarray:
    """Per-ray surface color: object base color plus positional modulation."""
    palette = np.array([o.color for o in spec.objects] + [(0.0, 0.0, 0.0)])
    rgb = palette[ids]
    amps = np.array([o.texture for o in spec.objects] + [0.0])[ids]
    lit = amps > 0
    if np.any(lit):
        points = origins[lit] + ts[lit, None] * dirs[lit]
        wave = np.sin(2.0 * np.pi * points @ _TEXTURE_FREQ.T + _TEXTURE_PHASE)
        rgb[lit] = np.clip(rgb[lit] + amps[lit, None] * wave, 0.0, 1.0)
    return rgb


def _block_majority(ids: np.ndarray, block: int, n_ids: int) -> np.ndarray:
    """Majority id per block (ties to the lowest id), written back per pixel."""
    if block <= 1:
        return ids
    h, w = ids.shape
    out = np.empty_like(ids)
    for y in range(0, h, block):
        for x in range(0, w, block):
            tile = ids[y : y + block, x : x + block]
            counts = np.bincount(tile.reshape(-1), minlength=n_ids)
            out[y : y + block, x : x + block] = np.argmax(counts)
    return out


def generate_synthetic_scene(
    spec: SyntheticSceneSpec, out_path=None, seed: int = 0
) -> SceneDataset:
    """Raytrace a synthetic scene into a full dataset; optionally save it.

    Deterministic for a fixed (spec, seed): identical bytes on disk.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    table = _build_label_table(spec, rng)
    lo, hi = spec.scene_bounds()
    center = np.asarray(spec.orbit_center, dtype=np.float64)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    scene_radius = float(np.max(np.linalg.norm(corners - center, axis=1)))
    if spec.orbit_radius <= scene_radius + 0.05:
        raise ValueError("orbit radius must exceed the scene radius")
    near = max(0.05, spec.orbit_radius - scene_radius - 0.1)
    far = spec.orbit_radius + scene_radius + 0.1
    focal = spec.focal
    if focal is None:
        # frame the circumscribed sphere edge-to-edge: half-width at distance
        # sqrt(D^2 - r^2) equals the scene radius
        focal = (
            0.5
            * min(spec.width, spec.height)
            * np.sqrt(spec.orbit_radius**2 - scene_radius**2)
            / scene_radius
        )

    elev = np.deg2rad(spec.orbit_elevation_deg)
    span = spec.arc_span_deg
    if span >= 360.0 or spec.n_views == 1:
        angles = spec.arc_start_deg + span * np.arange(spec.n_views) / spec.n_views
    else:
        angles = spec.arc_start_deg + span * np.arange(spec.n_views) / (spec.n_views - 1)
    cameras = []
    for a in np.deg2rad(angles):
        eye = center + spec.orbit_radius * np.array(
            [np.cos(a) * np.cos(elev), np.sin(a) * np.cos(elev), np.sin(elev)]
        )
        pose = look_at_pose(eye, center)
        cameras.append(
            CameraModel(
                fx=focal, fy=focal, cx=spec.width / 2, cy=spec.height / 2,
                width=spec.width, height=spec.height, pose=pose,
            )
        )

    labels = [o.label for o in spec.objects] + [spec.background_label]
    embeds = np.stack([table.get(l) for l in labels])
    n_ids = len(labels)
    ss = spec.supersample

    images, teacher_v, teacher_l = [], [], []
    id_maps = []
    for cam in cameras:
        super_cam = CameraModel(
            fx=cam.fx * ss, fy=cam.fy * ss, cx=cam.cx * ss, cy=cam.cy * ss,
            width=cam.width * ss, height=cam.height * ss, pose=cam.pose,
        )
        so, sd = pixel_grid_rays(super_cam)
        sid, st = _trace_hits(spec, so, sd, t_max=far)
        shade = _hit_colors(spec, so, sd, sid, st)
        srgb = shade.reshape(cam.height, ss, cam.width, ss, 3).mean(axis=(1, 3))
        quant = np.clip(np.round(srgb * 255.0), 0, 255).astype(np.uint8)
        # match _load_png exactly so in-memory and reloaded pixels agree
        images.append(np.asarray(quant, dtype=np.float32) / np.float32(255.0))

        po, pd = pixel_grid_rays(cam)
        pid, _ = _trace_hits(spec, po, pd, t_max=far)
        pid = pid.reshape(cam.height, cam.width)
        id_maps.append(pid)

        tv = embeds[pid] + spec.noise_visual * rng.normal(size=(cam.height, cam.width, spec.embed_dim))
        tv /= np.linalg.norm(tv, axis=-1, keepdims=True)
        teacher_v.append(tv.astype(np.float32))

        lid = _block_majority(pid, spec.lang_block, n_ids)
        tl = embeds[lid] + spec.noise_language * rng.normal(size=(cam.height, cam.width, spec.embed_dim))
        tl /= np.linalg.norm(tl, axis=-1, keepdims=True)
        teacher_l.append(tl.astype(np.float32))

    masks = {
        obj.label: [id_maps[v] == oi for v in range(spec.n_views)]
        for oi, obj in enumerate(spec.objects)
    }
    if spec.test_every > 0:
        test_views = [i for i in range(spec.n_views) if i % spec.test_every == spec.test_every // 2]
    else:
        test_views = []
    train_views = [i for i in range(spec.n_views) if i not in test_views]

    ds = SceneDataset(
        cameras=cameras,
        images=images,
        teacher_v=teacher_v,
        teacher_l=teacher_l,
        near=near,
        far=far,
        train_views=train_views,
        test_views=test_views,
        label_table=table,
        objects=[
            {"label": o.label, "color": list(o.color), "kind": o.kind} for o in spec.objects
        ],
        fg_labels=list(spec.fg_labels),
        background_label=spec.background_label,
        background_color=(0.0, 0.0, 0.0),
        bbox_min=tuple(lo),
        bbox_max=tuple(hi),
        masks=masks,
        root=None if out_path is None else Path(out_path),
    )
    if out_path is not None:
        save_dataset(ds, out_path)
    return ds
