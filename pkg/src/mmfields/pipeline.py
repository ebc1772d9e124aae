"""End-to-end orchestration shared by the CLI and the HTTP service.

A *run* is a directory produced by training:

    run.json          scene path, seed, schedule, loss weights, field shape
    checkpoint.ckpt   the trained grids
    report.json       loss series and timings

Every consumer (CLI subcommands, service endpoints, tests) goes through the
helpers here, so a query issued over HTTP and the same query issued on the
command line produce byte-identical artifacts.
"""

from __future__ import annotations

import io
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import SceneDataset, load_checkpoint, load_dataset, save_checkpoint
from .decompose import (
    EditOp,
    Query,
    apply_edit,
    kmeans_segment,
    patch_query_feature,
    region_mask,
    relevancy_map,
)
from .field import FieldConfig, VoxelFieldSet, create_field
from .losses import LossWeights, PatchBatch, feature_correspondence, select_pairs
from .metrics import iou, psnr, ssim
from .renderer import render_view
from .trainer import GRADCHECK_SELECTORS, TrainSchedule, check_gradients, train

__all__ = [
    "RunContext",
    "DEFAULT_EVAL_SAMPLES",
    "train_run",
    "load_run",
    "encode_png",
    "render_frame",
    "QueryRequest",
    "QueryResult",
    "resolve_query",
    "run_query",
    "evaluate",
    "SegmentResult",
    "segment_view",
    "segment_miou",
    "gradcheck_run",
]

DEFAULT_EVAL_SAMPLES = 128


@dataclass
class RunContext:
    root: Path | None
    dataset: SceneDataset
    field: VoxelFieldSet
    meta: dict


# ---------------------------------------------------------------------------
# training and loading


def train_run(
    scene_path,
    out_dir,
    *,
    resolution=(64, 64, 64),
    density_init: float = -4.0,
    color_init: float = 0.0,
    schedule: TrainSchedule | None = None,
    weights: LossWeights | None = None,
    seed: int = 0,
    detach_feature_density: bool = True,
    start_phase: int = 1,
    init_checkpoint=None,
    log_every: int = 0,
):
    """Train on a scene directory and persist the run; returns (ctx, report)."""
    dataset = load_dataset(scene_path)
    schedule = schedule or TrainSchedule()
    weights = weights or LossWeights()
    if init_checkpoint is not None:
        field = load_checkpoint(init_checkpoint)
    else:
        if dataset.bbox_min is None:
            raise ValueError("scene has no bbox; provide an initial checkpoint instead")
        if dataset.teacher_v is None or dataset.teacher_l is None:
            raise ValueError("scene has no teacher feature maps")
        cfg = FieldConfig(
            resolution=tuple(resolution),
            bbox_min=tuple(dataset.bbox_min),
            bbox_max=tuple(dataset.bbox_max),
            d_v=dataset.teacher_v[0].shape[-1],
            d_l=dataset.teacher_l[0].shape[-1],
            density_init=density_init,
            color_init=color_init,
        )
        field = create_field(cfg)
    field, report = train(
        dataset,
        field,
        schedule,
        weights,
        seed=seed,
        detach_feature_density=detach_feature_density,
        start_phase=start_phase,
        log_every=log_every,
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(field, out / "checkpoint.ckpt")
    cfg = field.config
    meta = {
        "scene": str(scene_path),
        "seed": seed,
        "start_phase": start_phase,
        "detach_feature_density": detach_feature_density,
        "schedule": asdict(schedule),
        "weights": asdict(weights),
        "field": {
            "resolution": list(cfg.resolution),
            "bbox_min": list(cfg.bbox_min),
            "bbox_max": list(cfg.bbox_max),
            "d_v": cfg.d_v,
            "d_l": cfg.d_l,
            "density_init": cfg.density_init,
            "color_init": cfg.color_init,
        },
    }
    if init_checkpoint is not None:
        meta["init_checkpoint"] = str(init_checkpoint)
    with open(out / "run.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    with open(out / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    return RunContext(root=out, dataset=dataset, field=field, meta=meta), report


def load_run(run_dir) -> RunContext:
    root = Path(run_dir)
    meta_path = root / "run.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{root}: not a run directory (no run.json)")
    meta = json.loads(meta_path.read_text())
    scene = Path(meta["scene"])
    if not scene.is_absolute():
        scene = root / scene
    dataset = load_dataset(scene)
    field = load_checkpoint(root / "checkpoint.ckpt")
    return RunContext(root=root, dataset=dataset, field=field, meta=meta)


# ---------------------------------------------------------------------------
# rendering


def encode_png(arr: np.ndarray) -> bytes:
    """Encode an image deterministically: float arrays are 0..1, bools 0/255."""
    arr = np.asarray(arr)
    if arr.dtype == bool:
        u8 = arr.astype(np.uint8) * 255
    else:
        u8 = np.clip(np.round(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if u8.ndim == 2 else "RGB"
    buf = io.BytesIO()
    Image.fromarray(u8, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def render_frame(
    ctx: RunContext,
    view: int | None = None,
    pose: np.ndarray | None = None,
    n_samples: int = DEFAULT_EVAL_SAMPLES,
    features: bool = False,
):
    """Render a dataset view (by index) or an arbitrary pose reusing the
    intrinsics of view 0."""
    if (view is None) == (pose is None):
        raise ValueError("specify exactly one of view or pose")
    if view is not None:
        if not 0 <= view < ctx.dataset.n_views:
            raise IndexError(f"view {view} out of range [0, {ctx.dataset.n_views})")
        cam = ctx.dataset.cameras[view]
    else:
        base = ctx.dataset.cameras[0]
        pose = np.asarray(pose, dtype=np.float64).reshape(4, 4)
        cam = base.__class__(
            fx=base.fx, fy=base.fy, cx=base.cx, cy=base.cy,
            width=base.width, height=base.height, pose=pose,
        )
    return render_view(
        ctx.field, cam, n_samples=n_samples,
        near=ctx.dataset.near, far=ctx.dataset.far, features=features,
    )


# ---------------------------------------------------------------------------
# queries


@dataclass
class QueryRequest:
    """One decomposition request; exactly one of label/rect/embedding."""

    label: str | None = None
    rect: tuple | None = None  # (view, x0, y0, x1, y1)
    embedding: object = None
    modality: str = "language"
    threshold: float = 0.8
    edit: str = "extract"
    color: tuple | None = None
    view: int | None = None  # render target; default: first test view
    n_samples: int = DEFAULT_EVAL_SAMPLES

    def __post_init__(self):
        sources = [self.label is not None, self.rect is not None, self.embedding is not None]
        if sum(sources) != 1:
            raise ValueError("provide exactly one of label, rect, or embedding")
        if self.rect is not None and len(self.rect) != 5:
            raise ValueError("rect must be (view, x0, y0, x1, y1)")


@dataclass
class QueryResult:
    query: Query
    field: VoxelFieldSet  # after the requested edit
    view: int
    render: np.ndarray  # (H, W, 3) of the edited field
    mask2d: np.ndarray  # (H, W) bool: where the selected region is visible
    stats: dict
    gt_label: str | None


def _rect_gt_label(ctx: RunContext, rect) -> str | None:
    """Majority object under the rect, judged from ground-truth masks."""
    if ctx.dataset.masks is None or ctx.dataset.objects is None:
        return None
    view, x0, y0, x1, y1 = (int(v) for v in rect)
    best, best_count = None, 0
    for obj in ctx.dataset.objects:
        count = int(ctx.dataset.masks[obj["label"]][view][y0:y1, x0:x1].sum())
        if count > best_count:
            best, best_count = obj["label"], count
    return best


def resolve_query(ctx: RunContext, req: QueryRequest):
    """Build the canonical Query; returns (query, gt_label or None)."""
    if req.label is not None:
        if ctx.dataset.label_table is None:
            raise LookupError("this scene has no label table")
        vec = ctx.dataset.label_table.get(req.label)
        gt = req.label if ctx.dataset.masks and req.label in ctx.dataset.masks else None
        return Query(vec, threshold=req.threshold), gt
    if req.rect is not None:
        view = int(req.rect[0])
        if not 0 <= view < ctx.dataset.n_views:
            raise IndexError(f"rect view {view} out of range")
        frame = render_frame(ctx, view=view, n_samples=req.n_samples, features=True)
        fm = frame.feat_l if req.modality == "language" else frame.feat_v
        vec = patch_query_feature(fm, req.rect[1:])
        return Query(vec, threshold=req.threshold), _rect_gt_label(ctx, req.rect)
    return Query(np.asarray(req.embedding, dtype=np.float64), threshold=req.threshold), None


def run_query(ctx: RunContext, req: QueryRequest) -> QueryResult:
    """Resolve, edit, render, and score one query."""
    query, gt_label = resolve_query(ctx, req)
    op = EditOp(req.edit, query, req.modality, color=req.color)
    edited = apply_edit(ctx.field, op)
    view = req.view
    if view is None:
        view = ctx.dataset.test_views[0] if ctx.dataset.test_views else 0
    view_ctx = RunContext(root=ctx.root, dataset=ctx.dataset, field=edited, meta=ctx.meta)
    frame = render_frame(view_ctx, view=view, n_samples=req.n_samples)
    if req.edit == "extract":
        extracted_frame = frame
    else:
        extracted = apply_edit(ctx.field, EditOp("extract", query, req.modality))
        ex_ctx = RunContext(root=ctx.root, dataset=ctx.dataset, field=extracted, meta=ctx.meta)
        extracted_frame = render_frame(ex_ctx, view=view, n_samples=req.n_samples)
    mask2d = extracted_frame.opacity >= 0.5
    mask3d = region_mask(ctx.field, query, req.modality)
    stats = {"selected_voxel_fraction": float(mask3d.mean()), "view": int(view)}
    if gt_label is not None:
        gt_mask = ctx.dataset.masks[gt_label][view]
        stats["mask_iou"] = iou(mask2d, gt_mask)
        stats["gt_label"] = gt_label
    return QueryResult(
        query=query, field=edited, view=int(view), render=frame.rgb,
        mask2d=mask2d, stats=stats, gt_label=gt_label,
    )


# ---------------------------------------------------------------------------
# evaluation


def evaluate(ctx: RunContext, n_samples: int = DEFAULT_EVAL_SAMPLES, views=None) -> dict:
    """PSNR/SSIM against ground truth on held-out (or given) views."""
    if views is None:
        views = ctx.dataset.test_views or list(range(ctx.dataset.n_views))
    per_view = {}
    for v in views:
        frame = render_frame(ctx, view=int(v), n_samples=n_samples)
        gt = ctx.dataset.images[int(v)]
        per_view[str(int(v))] = {
            "psnr": float(psnr(frame.rgb, gt)),
            "ssim": float(ssim(frame.rgb, gt)),
        }
    vals = list(per_view.values())
    return {
        "views": per_view,
        "mean_psnr": float(np.mean([x["psnr"] for x in vals])),
        "mean_ssim": float(np.mean([x["ssim"] for x in vals])),
        "n_samples": int(n_samples),
    }


# ---------------------------------------------------------------------------
# segmentation


@dataclass
class SegmentResult:
    labels: np.ndarray  # (H, W) int32; -1 where nothing was rendered
    valid: np.ndarray  # (H, W) bool: opacity >= 0.5
    k: int


def segment_view(
    ctx: RunContext, view: int, k: int = 2, seed: int = 0,
    n_samples: int = DEFAULT_EVAL_SAMPLES,
) -> SegmentResult:
    """Cluster the rendered visual features of one view.

    Pixels with opacity < 0.5 carry near-zero features (empty space) and are
    excluded from clustering; they get label -1.
    """
    frame = render_frame(ctx, view=view, n_samples=n_samples, features=True)
    valid = frame.opacity >= 0.5
    labels = np.full(valid.shape, -1, dtype=np.int32)
    if valid.any():
        labels[valid] = kmeans_segment(frame.feat_v[valid], k, seed=seed)
    return SegmentResult(labels=labels, valid=valid, k=k)


def segment_miou(result: SegmentResult, gt_fg: np.ndarray):
    """Best foreground assignment of clusters against a GT mask.

    Returns (miou, fg_cluster). Invalid pixels always count as background.
    """
    gt_fg = np.asarray(gt_fg, dtype=bool)
    best = (-1.0, 0)
    for c in range(result.k):
        pred_fg = (result.labels == c) & result.valid
        score = 0.5 * (iou(pred_fg, gt_fg) + iou(~pred_fg, ~gt_fg))
        if score > best[0]:
            best = (score, c)
    return best


def correspondence_gap(
    ctx: RunContext, *, seed: int = 0, n_batches: int = 8,
    patches_per_batch: int = 6, patch_size: int = 8, n_samples: int = 64,
) -> float:
    """Mean positive-minus-negative pixel correspondence over random patches.

    Draws seeded patch batches from pairs of training views, selects each
    patch's most and least similar partner, and averages the difference of
    all-pairs pixel cosines against the two partners over both feature
    modalities. A field whose features are coherent within matching surfaces
    scores positive; an untrained field scores near zero.
    """
    ds = ctx.dataset
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    w, h = ds.image_size
    p = patch_size
    frames: dict[int, object] = {}

    def frame(view: int):
        if view not in frames:
            frames[view] = render_frame(ctx, view=view, n_samples=n_samples, features=True)
        return frames[view]

    gaps = []
    for _ in range(n_batches):
        pair = rng.choice(np.asarray(ds.train_views), size=2, replace=False)
        k = patches_per_batch
        view_ids = np.array([int(pair[i % 2]) for i in range(k)])
        x0 = rng.integers(0, w - p + 1, size=k)
        y0 = rng.integers(0, h - p + 1, size=k)
        fv, fl, rgb, depth = [], [], [], []
        for v, x, y in zip(view_ids, x0, y0):
            fr = frame(int(v))
            fv.append(fr.feat_v[y:y + p, x:x + p])
            fl.append(fr.feat_l[y:y + p, x:x + p])
            rgb.append(fr.rgb[y:y + p, x:x + p])
            depth.append(fr.depth[y:y + p, x:x + p])
        fv, fl, rgb, depth = np.stack(fv), np.stack(fl), np.stack(rgb), np.stack(depth)
        batch = PatchBatch(
            view_ids=view_ids,
            rects=np.stack([x0, y0, np.full(k, p), np.full(k, p)], axis=1),
            feat_v=fv, feat_l=fl, rgb=rgb, depth=depth,
            app=ds.patch_extractor(rgb),
        )
        pairs = select_pairs(batch)
        for a in range(k):
            for feats in (fv, fl):
                pos = feature_correspondence(feats[a], feats[pairs.positive[a]])
                neg = feature_correspondence(feats[a], feats[pairs.negative[a]])
                gaps.append(float(pos.mean() - neg.mean()))
    return float(np.mean(gaps))


# ---------------------------------------------------------------------------
# gradcheck


def gradcheck_run(selectors=None, tolerance: float = 1e-4, n_probes: int = 64, seed: int = 0):
    """Finite-difference checks over the requested loss selectors."""
    if selectors is None:
        selectors = list(GRADCHECK_SELECTORS)
    t0 = time.perf_counter()
    reports = [
        check_gradients(None, sel, n_probes=n_probes, tolerance=tolerance, seed=seed)
        for sel in selectors
    ]
    return reports, time.perf_counter() - t0
