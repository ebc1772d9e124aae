"""Staged optimization of a voxel field set with hand-computed gradients.

Three phases, mirroring how the objective is grown:

1. photometric only: density and color grids train from scratch;
2. all grids: distillation toward the two teacher feature maps and the
   modality-alignment term join the photometric loss;
3. density and color freeze ("backbone and RGB branch"), and the patch
   contrastive term joins in to refine the feature branches.

Feature-side losses (distillation, alignment, contrastive) update only the
feature grids by default: their pull on the compositing weights is detached,
which keeps semantics from warping recovered geometry. The full
geometry-coupled chain exists as well and is what ``check_gradients``
verifies against central finite differences.

Optimization is Adam with bias correction, one moment pair per grid, cosine
learning-rate decay within each phase, and fresh optimizer state per phase
(so a run resumed at a phase boundary reproduces a continuous run exactly).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import losses as L
from .field import VoxelFieldSet, create_field, FieldConfig
from .geometry import CameraModel, look_at_pose
from .renderer import RayBundle, Upstream, backward_rays, forward_rays, make_ray_bundle

__all__ = [
    "TrainSchedule",
    "TrainReport",
    "TrainingDiverged",
    "OptimizerState",
    "GradCheckReport",
    "init_optimizer",
    "adam_step",
    "train",
    "check_gradients",
    "GRADCHECK_SELECTORS",
]

_PHASE_TRAINABLE = {
    1: {"density", "color"},
    2: {"density", "color", "feat_v", "feat_l"},
    3: {"feat_v", "feat_l"},
}
_PHASE_TERMS = {
    1: {"color"},
    2: {"color", "distill", "mms"},
    3: {"color", "distill", "mms", "cl"},
}


class TrainingDiverged(RuntimeError):
    """A loss term or gradient became non-finite; message names the culprit."""


@dataclass
class TrainSchedule:
    """Iteration counts, batch sizes, and learning rates for the three phases.

    Each grid runs at the base rate times a per-grid scale. Raw densities
    travel tens of softplus units to become opaque, so they run much hotter
    than the color grid. Feature grids run cooler: Adam parks each voxel in
    a noise band proportional to its effective rate, and unit-norm feature
    queries thresholded near 1 leave little room for that jitter. Feature
    phases also draw larger ray batches than the photometric phase: a
    voxel's feature only moves on iterations whose rays touch it, and
    infrequent touches leave Adam's variance estimate stale, which turns
    each touch into an outsized kick. Phase 3 runs at a reduced base rate
    for the same reason; the contrastive term reorganizes features near
    convergence and larger steps smear more than they sharpen.
    """

    phase1_iters: int = 20000
    phase2_iters: int = 5000
    phase3_iters: int = 5000
    rays_per_batch: int = 1024
    rays_feature_phases: int | None = 4096  # phases 2-3; None = rays_per_batch
    patches_per_batch: int = 8
    n_samples: int = 64
    lr_phase1: float = 0.05
    lr_phase2: float = 0.05
    lr_phase3: float = 0.03
    lr_density_scale: float = 10.0
    lr_color_scale: float = 2.0
    lr_feature_scale: float = 0.25
    lr_floor: float = 0.0  # cosine decay ends at lr * lr_floor

    def __post_init__(self):
        if min(self.phase1_iters, self.phase2_iters, self.phase3_iters) < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.rays_per_batch < 1 or self.n_samples < 1:
            raise ValueError("rays_per_batch and n_samples must be >= 1")
        if self.rays_feature_phases is not None and self.rays_feature_phases < 1:
            raise ValueError("rays_feature_phases must be >= 1 when set")
        if self.patches_per_batch < 3 and self.phase3_iters > 0:
            raise ValueError("contrastive phase needs at least 3 patches per batch")
        if min(self.lr_phase1, self.lr_phase2, self.lr_phase3) <= 0:
            raise ValueError("learning rates must be positive")
        if not (0.0 <= self.lr_floor <= 1.0):
            raise ValueError("lr_floor must lie in [0, 1]")

    @classmethod
    def desk(cls, **overrides) -> "TrainSchedule":
        """Small-scene schedule: 2000 / 500 / 500 iterations."""
        kw = dict(phase1_iters=2000, phase2_iters=500, phase3_iters=500)
        kw.update(overrides)
        return cls(**kw)

    def phase_iters(self, phase: int) -> int:
        return (self.phase1_iters, self.phase2_iters, self.phase3_iters)[phase - 1]

    def phase_lr(self, phase: int) -> float:
        return (self.lr_phase1, self.lr_phase2, self.lr_phase3)[phase - 1]

    def phase_rays(self, phase: int) -> int:
        if phase >= 2 and self.rays_feature_phases is not None:
            return self.rays_feature_phases
        return self.rays_per_batch

    def grid_lr_scale(self, name: str) -> float:
        scales = {
            "density": self.lr_density_scale,
            "color": self.lr_color_scale,
            "feat_v": self.lr_feature_scale,
            "feat_l": self.lr_feature_scale,
        }
        return scales.get(name, 1.0)


@dataclass
class OptimizerState:
    """Adam moments per grid plus the shared step counter and hyperparameters."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-2


def init_optimizer(field: VoxelFieldSet, grids, lr: float = 1e-2) -> OptimizerState:
    # moments live in grid precision: the update path is memory-bound and the
    # extra mantissa of float64 buys nothing for a noisy stochastic estimate
    m = {name: np.zeros(field.grids()[name].shape, dtype=np.float32) for name in grids}
    v = {name: np.zeros(field.grids()[name].shape, dtype=np.float32) for name in grids}
    return OptimizerState(m=m, v=v, lr=lr)


def adam_step(
    field: VoxelFieldSet,
    gradients: dict,
    state: OptimizerState,
    lr_scales=None,
):
    """One bias-corrected Adam update, in place. Grids without optimizer state
    (frozen) are skipped even if a gradient is supplied."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in gradients.items():
        if name not in state.m:
            continue
        g = g.astype(np.float32, copy=False)
        m, v = state.m[name], state.v[name]
        np.multiply(m, np.float32(state.beta1), out=m)
        m += np.float32(1.0 - state.beta1) * g
        np.multiply(v, np.float32(state.beta2), out=v)
        v += np.float32(1.0 - state.beta2) * np.square(g)
        scale = 1.0 if lr_scales is None else lr_scales.get(name, 1.0)
        denom = np.sqrt(v * np.float32(1.0 / bc2))
        denom += np.float32(state.eps)
        np.divide(m, denom, out=denom)
        denom *= np.float32(state.lr * scale / bc1)
        grid = field.grids()[name]
        grid -= denom
    return field, state


def _cosine_lr(base: float, it: int, total: int, floor: float) -> float:
    if total <= 1:
        return base
    frac = 0.5 * (1.0 + np.cos(np.pi * it / (total - 1)))
    return base * (floor + (1.0 - floor) * frac)


@dataclass
class RayTargets:
    gt_rgb: np.ndarray | None = None
    teacher_v: np.ndarray | None = None
    teacher_l: np.ndarray | None = None


@dataclass
class PatchContext:
    """Patch-ray geometry plus the frozen parts of the contrastive batch.

    ``app`` and ``pairs`` are targets: when None they are computed from the
    current render (training); the gradient checker passes fixed values so
    the checked function is exactly the one differentiated.
    """

    bundle: RayBundle
    view_ids: np.ndarray
    rects: np.ndarray
    n_patches: int
    patch_size: int
    extractor: object = None
    app: np.ndarray | None = None
    pairs: L.PairSelection | None = None


def compute_losses_and_grads(
    field: VoxelFieldSet,
    bundle: RayBundle,
    targets: RayTargets,
    patch_ctx: PatchContext | None,
    weights: L.LossWeights,
    terms: set,
    train: set,
    detach_feature_density: bool = True,
    need_grads: bool = True,
):
    """Values of the enabled loss terms and total-loss gradients for ``train`` grids.

    Returns (parts, grads) where parts maps term names to raw (unweighted)
    values; gradients carry the lambda weights of the total objective.
    """
    want_feats = bool(terms & {"distill_v", "distill_l", "mms"})
    fwd = forward_rays(field, bundle, with_color="color" in terms, with_feats=want_feats)
    parts: dict[str, float] = {}
    up = Upstream()

    if "color" in terms:
        parts["color"] = L.color_loss(fwd.color_hat, targets.gt_rgb)
        if need_grads:
            up.d_color_hat = L.color_loss_grad(fwd.color_hat, targets.gt_rgb)
    if "distill_v" in terms:
        parts["distill_v"] = L.distill_loss(fwd.feat_v_hat, targets.teacher_v)
        if need_grads:
            g = L.distill_loss_grad(fwd.feat_v_hat, targets.teacher_v)
            up.d_feat_v_hat = weights.lambda_distill * g
    if "distill_l" in terms:
        parts["distill_l"] = L.distill_loss(fwd.feat_l_hat, targets.teacher_l)
        if need_grads:
            g = L.distill_loss_grad(fwd.feat_l_hat, targets.teacher_l)
            up.d_feat_l_hat = weights.lambda_distill * g
    if "mms" in terms:
        value, d_fv, d_fl, d_w = L.mms_weighted_grads(fwd.f_v, fwd.f_l, fwd.weight)
        parts["mms"] = value
        if need_grads:
            up.d_f_v = weights.lambda_mms * d_fv
            up.d_f_l = weights.lambda_mms * d_fl
            up.d_weight = weights.lambda_mms * d_w

    grads: dict[str, np.ndarray] = {}
    if need_grads:
        grads = backward_rays(
            field, bundle, fwd, up, train=train,
            detach_feature_density=detach_feature_density,
        )

    if patch_ctx is not None and "cl" in terms:
        pf = forward_rays(field, patch_ctx.bundle, with_color=True, with_feats=True)
        k, p = patch_ctx.n_patches, patch_ctx.patch_size
        cfg = field.config
        rgb = pf.color_hat.reshape(k, p, p, 3)
        app = patch_ctx.app
        if app is None:
            app = patch_ctx.extractor(rgb)
        batch = L.PatchBatch(
            view_ids=patch_ctx.view_ids,
            rects=patch_ctx.rects,
            feat_v=pf.feat_v_hat.reshape(k, p, p, cfg.d_v),
            feat_l=pf.feat_l_hat.reshape(k, p, p, cfg.d_l),
            rgb=rgb,
            depth=pf.depth.reshape(k, p, p),
            app=app,
        )
        pairs = patch_ctx.pairs if patch_ctx.pairs is not None else L.select_pairs(batch)
        cl = L.joint_cl_grads(batch, pairs, weights, need_depth=not detach_feature_density)
        parts["cl"] = cl.value
        parts.update({f"cl_{k2}": v for k2, v in cl.parts.items()})
        if need_grads:
            pup = Upstream(
                d_feat_v_hat=weights.lambda_cl * cl.d_feat_v.reshape(k * p * p, cfg.d_v),
                d_feat_l_hat=weights.lambda_cl * cl.d_feat_l.reshape(k * p * p, cfg.d_l),
                d_depth=None
                if cl.d_depth is None
                else weights.lambda_cl * cl.d_depth.reshape(k * p * p),
            )
            pgrads = backward_rays(
                field, patch_ctx.bundle, pf, pup, train=train,
                detach_feature_density=detach_feature_density,
            )
            for name, g in pgrads.items():
                grads[name] = grads[name] + g if name in grads else g

    return parts, grads


@dataclass
class TrainReport:
    """Per-iteration loss series and wall-clock accounting."""

    iteration: list = dc_field(default_factory=list)
    phase: list = dc_field(default_factory=list)
    color: list = dc_field(default_factory=list)
    distill: list = dc_field(default_factory=list)
    mms: list = dc_field(default_factory=list)
    cl: list = dc_field(default_factory=list)
    total: list = dc_field(default_factory=list)
    phase_seconds: dict = dc_field(default_factory=dict)
    wall_seconds: float = 0.0

    def record(self, it, phase, parts, total):
        self.iteration.append(int(it))
        self.phase.append(int(phase))
        self.color.append(float(parts.get("color", 0.0)))
        self.distill.append(float(parts.get("distill_v", 0.0) + parts.get("distill_l", 0.0)))
        self.mms.append(float(parts.get("mms", 0.0)))
        self.cl.append(float(parts.get("cl", 0.0)))
        self.total.append(float(total))

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "phase": self.phase,
            "color": self.color,
            "distill": self.distill,
            "mms": self.mms,
            "cl": self.cl,
            "total": self.total,
            "phase_seconds": self.phase_seconds,
            "wall_seconds": self.wall_seconds,
        }


def _camera_dirs(camera: CameraModel, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    d_cam = np.stack(
        [
            (px + 0.5 - camera.cx) / camera.fx,
            -(py + 0.5 - camera.cy) / camera.fy,
            -np.ones_like(px, dtype=np.float64),
        ],
        axis=-1,
    )
    d = d_cam @ camera.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _draw_ray_batch(dataset, rng, n_rays, need_teachers):
    views = rng.choice(np.asarray(dataset.train_views), size=n_rays)
    h, w = dataset.images[dataset.train_views[0]].shape[:2]
    px = rng.integers(0, w, size=n_rays)
    py = rng.integers(0, h, size=n_rays)
    origins = np.zeros((n_rays, 3))
    dirs = np.zeros((n_rays, 3))
    for v in np.unique(views):
        sel = views == v
        cam = dataset.cameras[int(v)]
        origins[sel] = cam.origin
        dirs[sel] = _camera_dirs(cam, px[sel].astype(np.float64), py[sel].astype(np.float64))
    gt = np.stack([dataset.images[int(v)][y, x] for v, y, x in zip(views, py, px)])
    targets = RayTargets(gt_rgb=gt.astype(np.float64))
    if need_teachers:
        targets.teacher_v = np.stack(
            [dataset.teacher_v[int(v)][y, x] for v, y, x in zip(views, py, px)]
        ).astype(np.float64)
        targets.teacher_l = np.stack(
            [dataset.teacher_l[int(v)][y, x] for v, y, x in zip(views, py, px)]
        ).astype(np.float64)
    return origins, dirs, targets


def _draw_patch_rays(dataset, rng, n_patches, patch_size):
    """Rects round-robin over two sampled views; returns ray grids per pixel."""
    pair = rng.choice(np.asarray(dataset.train_views), size=2, replace=False)
    view_ids = np.array([pair[i % 2] for i in range(n_patches)])
    h, w = dataset.images[dataset.train_views[0]].shape[:2]
    p = patch_size
    if w < p or h < p:
        raise ValueError("images are smaller than the patch size")
    x0 = rng.integers(0, w - p + 1, size=n_patches)
    y0 = rng.integers(0, h - p + 1, size=n_patches)
    rects = np.stack([x0, y0, np.full(n_patches, p), np.full(n_patches, p)], axis=1)
    origins = np.zeros((n_patches * p * p, 3))
    dirs = np.zeros((n_patches * p * p, 3))
    ii, jj = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")  # ii rows, jj cols
    for k in range(n_patches):
        cam = dataset.cameras[int(view_ids[k])]
        px = (x0[k] + jj).reshape(-1).astype(np.float64)
        py = (y0[k] + ii).reshape(-1).astype(np.float64)
        sl = slice(k * p * p, (k + 1) * p * p)
        origins[sl] = cam.origin
        dirs[sl] = _camera_dirs(cam, px, py)
    return origins, dirs, view_ids, rects


def train(
    dataset,
    field: VoxelFieldSet,
    schedule: TrainSchedule,
    weights: L.LossWeights,
    seed: int = 0,
    *,
    detach_feature_density: bool = True,
    extractor=None,
    start_phase: int = 1,
    log_every: int = 0,
):
    """Run the three-phase schedule on ``field`` in place; returns it with a report.

    ``start_phase`` skips earlier phases (their randomness streams are
    independent, so resuming from a phase boundary reproduces a full run).
    A zero-iteration schedule returns the field unchanged.
    """
    cfg = field.config
    needs_teachers = schedule.phase2_iters > 0 or schedule.phase3_iters > 0
    if needs_teachers:
        if getattr(dataset, "teacher_v", None) is None or getattr(dataset, "teacher_l", None) is None:
            raise ValueError("phases 2 and 3 need teacher feature maps in the dataset")
        if cfg.d_v != dataset.teacher_v[0].shape[-1] or cfg.d_l != dataset.teacher_l[0].shape[-1]:
            raise ValueError("field feature dims must match the dataset's teacher dims")
        if weights.lambda_mms > 0 and cfg.d_v != cfg.d_l:
            raise ValueError("modality alignment needs d_v == d_l")
    if extractor is None:
        extractor = getattr(dataset, "patch_extractor", None)
    if schedule.phase3_iters > 0 and weights.lambda_cl > 0 and extractor is None:
        raise ValueError("the contrastive phase needs a patch feature extractor")

    report = TrainReport()
    phase_seeds = np.random.SeedSequence(seed).spawn(3)
    t_start = time.perf_counter()
    global_it = 0
    for phase in (1, 2, 3):
        iters = schedule.phase_iters(phase)
        if phase < start_phase or iters == 0:
            continue
        rng = np.random.default_rng(phase_seeds[phase - 1])
        trainable = _PHASE_TRAINABLE[phase]
        terms = set(_PHASE_TERMS[phase])
        if "distill" in terms:
            terms.discard("distill")
            terms |= {"distill_v", "distill_l"}
        if weights.lambda_cl == 0:
            terms.discard("cl")
        if weights.lambda_mms == 0:
            terms.discard("mms")
        opt = init_optimizer(field, trainable)
        lr_scales = {name: schedule.grid_lr_scale(name) for name in trainable}
        n_rays = schedule.phase_rays(phase)
        t_phase = time.perf_counter()
        for it in range(iters):
            opt.lr = _cosine_lr(schedule.phase_lr(phase), it, iters, schedule.lr_floor)
            origins, dirs, targets = _draw_ray_batch(
                dataset, rng, n_rays, need_teachers=phase >= 2
            )
            jit = rng.uniform(size=(n_rays, schedule.n_samples))
            bundle = make_ray_bundle(
                cfg, origins, dirs, schedule.n_samples, jitter_u=jit,
                near=dataset.near, far=dataset.far,
            )
            patch_ctx = None
            if "cl" in terms:
                p = weights.patch_size
                po, pd, view_ids, rects = _draw_patch_rays(
                    dataset, rng, schedule.patches_per_batch, p
                )
                pjit = rng.uniform(size=(po.shape[0], schedule.n_samples))
                pbundle = make_ray_bundle(
                    cfg, po, pd, schedule.n_samples, jitter_u=pjit,
                    near=dataset.near, far=dataset.far,
                )
                patch_ctx = PatchContext(
                    bundle=pbundle, view_ids=view_ids, rects=rects,
                    n_patches=schedule.patches_per_batch, patch_size=p,
                    extractor=extractor,
                )
            parts, grads = compute_losses_and_grads(
                field, bundle, targets, patch_ctx, weights, terms,
                train=trainable, detach_feature_density=detach_feature_density,
            )
            for name, value in parts.items():
                if not np.isfinite(value):
                    raise TrainingDiverged(f"loss term '{name}' became non-finite at iteration {global_it}")
            for name, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise TrainingDiverged(f"gradient for grid '{name}' became non-finite at iteration {global_it}")
            adam_step(field, grads, opt, lr_scales=lr_scales)
            distill = parts.get("distill_v", 0.0) + parts.get("distill_l", 0.0)
            total = L.total_loss(
                L.LossParts(
                    color=parts.get("color", 0.0),
                    distill=distill,
                    mms=parts.get("mms", 0.0),
                    cl=parts.get("cl", 0.0),
                ),
                weights,
            )
            report.record(global_it, phase, parts, total)
            if log_every and (it % log_every == 0 or it == iters - 1):
                print(
                    f"phase {phase} iter {it:5d}/{iters}  color {parts.get('color', 0.0):.4f}"
                    f"  total {total:.4f}",
                    flush=True,
                )
            global_it += 1
        report.phase_seconds[str(phase)] = time.perf_counter() - t_phase
    report.wall_seconds = time.perf_counter() - t_start
    return field, report


# ---------------------------------------------------------------------------
# Gradient checking


GRADCHECK_SELECTORS = (
    "color",
    "distill_v",
    "distill_l",
    "mms",
    "cl_app_v",
    "cl_geo_v",
    "cl_app_l",
    "cl_geo_l",
    "total",
)

# Per-selector: enabled terms, probed grids, and weight overrides that isolate
# the term (lambda = 1 for the checked term, 0 for its siblings).
_SELECTOR_SPEC = {
    "color": ({"color"}, {"density", "color"}, {}),
    "distill_v": ({"distill_v"}, {"density", "feat_v"}, {"lambda_distill": 1.0}),
    "distill_l": ({"distill_l"}, {"density", "feat_l"}, {"lambda_distill": 1.0}),
    "mms": ({"mms"}, {"density", "feat_v", "feat_l"}, {"lambda_mms": 1.0}),
    "cl_app_v": (
        {"cl"},
        {"density", "feat_v", "feat_l"},
        {"lambda_cl": 1.0, "lambda_v": 1.0, "lambda_l": 0.0, "lambda_app": 1.0, "lambda_geo": 0.0},
    ),
    "cl_geo_v": (
        {"cl"},
        {"density", "feat_v", "feat_l"},
        {"lambda_cl": 1.0, "lambda_v": 1.0, "lambda_l": 0.0, "lambda_app": 0.0, "lambda_geo": 1.0},
    ),
    "cl_app_l": (
        {"cl"},
        {"density", "feat_v", "feat_l"},
        {"lambda_cl": 1.0, "lambda_v": 0.0, "lambda_l": 1.0, "lambda_app": 1.0, "lambda_geo": 0.0},
    ),
    "cl_geo_l": (
        {"cl"},
        {"density", "feat_v", "feat_l"},
        {"lambda_cl": 1.0, "lambda_v": 0.0, "lambda_l": 1.0, "lambda_app": 0.0, "lambda_geo": 1.0},
    ),
    "total": (
        {"color", "distill_v", "distill_l", "mms", "cl"},
        {"density", "color", "feat_v", "feat_l"},
        {},
    ),
}


@dataclass
class GradCheckReport:
    selector: str
    n_probes: int
    tolerance: float
    max_rel_err: float
    passed: bool
    per_grid: dict


def _gradcheck_scenario(field: VoxelFieldSet, selector: str, seed: int, weights):
    """A fixed, self-contained differentiable scalar around ``field``.

    Rays, segment placement, teacher targets, the appearance features, and the
    pair selection are all frozen data; only the grids vary. ``eps_geo`` is
    enlarged to 0.05 so the geometry kernel's curvature stays within reach of
    central differences at h = 1e-4.
    """
    cfg = field.config
    rng = np.random.default_rng(seed)
    terms, probe_grids, overrides = _SELECTOR_SPEC[selector]
    if weights is None:
        weights = L.LossWeights(patch_size=3, eps_geo=0.05, **overrides)

    center = (np.array(cfg.bbox_min) + np.array(cfg.bbox_max)) / 2.0
    extent = float(np.max(np.array(cfg.bbox_max) - np.array(cfg.bbox_min)))
    cams = []
    for eye in ([1.1, -1.6, 0.9], [-1.4, 1.2, 1.1]):
        pose = look_at_pose(center + extent * np.asarray(eye), center)
        cams.append(CameraModel(fx=10.0, fy=10.0, cx=4.0, cy=4.0, width=8, height=8, pose=pose))

    n_rays, n_samples = 18, 6
    views = rng.integers(0, 2, size=n_rays)
    px = rng.uniform(0, 8, size=n_rays)
    py = rng.uniform(0, 8, size=n_rays)
    origins = np.stack([cams[v].origin for v in views])
    dirs = np.stack(
        [_camera_dirs(cams[v], np.array([x]), np.array([y]))[0] for v, x, y in zip(views, px, py)]
    )
    jit = rng.uniform(size=(n_rays, n_samples))
    bundle = make_ray_bundle(cfg, origins, dirs, n_samples, jitter_u=jit)

    targets = RayTargets(
        gt_rgb=rng.uniform(0, 1, size=(n_rays, 3)),
        teacher_v=rng.normal(size=(n_rays, cfg.d_v)),
        teacher_l=rng.normal(size=(n_rays, cfg.d_l)),
    )

    patch_ctx = None
    if "cl" in terms:
        k, p = 3, weights.patch_size
        view_ids = np.array([0, 1, 0])
        x0 = rng.integers(0, 8 - p + 1, size=k)
        y0 = rng.integers(0, 8 - p + 1, size=k)
        rects = np.stack([x0, y0, np.full(k, p), np.full(k, p)], axis=1)
        po = np.zeros((k * p * p, 3))
        pd = np.zeros((k * p * p, 3))
        ii, jj = np.meshgrid(np.arange(p), np.arange(p), indexing="ij")
        for i in range(k):
            cam = cams[view_ids[i]]
            qx = (x0[i] + jj).reshape(-1).astype(np.float64)
            qy = (y0[i] + ii).reshape(-1).astype(np.float64)
            sl = slice(i * p * p, (i + 1) * p * p)
            po[sl] = cam.origin
            pd[sl] = _camera_dirs(cam, qx, qy)
        pjit = rng.uniform(size=(k * p * p, n_samples))
        pbundle = make_ray_bundle(cfg, po, pd, n_samples, jitter_u=pjit)
        base = forward_rays(field, pbundle, with_color=True, with_feats=True)
        app = rng.normal(size=(k, p, p, 4))  # frozen appearance features
        batch = L.PatchBatch(
            view_ids=view_ids,
            rects=rects,
            feat_v=base.feat_v_hat.reshape(k, p, p, cfg.d_v),
            feat_l=base.feat_l_hat.reshape(k, p, p, cfg.d_l),
            rgb=base.color_hat.reshape(k, p, p, 3),
            depth=base.depth.reshape(k, p, p),
            app=app,
        )
        patch_ctx = PatchContext(
            bundle=pbundle, view_ids=view_ids, rects=rects, n_patches=k, patch_size=p,
            app=app, pairs=L.select_pairs(batch),
        )

    def eval_loss(f: VoxelFieldSet) -> float:
        parts, _ = compute_losses_and_grads(
            f, bundle, targets, patch_ctx, weights, terms,
            train=set(), detach_feature_density=False, need_grads=False,
        )
        distill = parts.get("distill_v", 0.0) + parts.get("distill_l", 0.0)
        return L.total_loss(
            L.LossParts(
                color=parts.get("color", 0.0),
                distill=distill,
                mms=parts.get("mms", 0.0),
                cl=parts.get("cl", 0.0),
            ),
            weights,
        )

    def eval_grads(f: VoxelFieldSet) -> dict:
        # compute_losses_and_grads folds each term's lambda into its upstream
        # and color has coefficient 1, so these are total-objective gradients.
        _, grads = compute_losses_and_grads(
            f, bundle, targets, patch_ctx, weights, terms,
            train=probe_grids, detach_feature_density=False,
        )
        return grads

    return eval_loss, eval_grads, probe_grids


def check_gradients(
    field: VoxelFieldSet | None,
    loss_selector: str,
    n_probes: int = 64,
    tolerance: float = 1e-4,
    seed: int = 0,
    h: float = 1e-4,
    weights: L.LossWeights | None = None,
) -> GradCheckReport:
    """Compare analytic grid gradients against central finite differences.

    Probes ``n_probes`` random grid entries (spread over the grids the
    selected term can reach, through the full geometry-coupled chain) and
    reports the largest relative error, measured as
    |analytic - fd| / max(|analytic|, |fd|, 1e-6 * (1 + |loss|)); the floor
    scales with the loss magnitude because so does finite-difference noise.
    """
    if loss_selector not in _SELECTOR_SPEC:
        raise ValueError(f"unknown selector '{loss_selector}'; choose from {GRADCHECK_SELECTORS}")
    if field is None:
        cfg = FieldConfig(
            resolution=(8, 8, 8), bbox_min=(-1, -1, -1), bbox_max=(1, 1, 1), d_v=6, d_l=6
        )
        rng = np.random.default_rng(seed + 1)
        field = create_field(cfg, dtype=np.float64)
        field.density_raw = 1.5 * rng.normal(size=field.density_raw.shape)
        field.color_raw = rng.normal(size=field.color_raw.shape)
        field.feat_v = rng.normal(size=field.feat_v.shape)
        field.feat_l = rng.normal(size=field.feat_l.shape)
    else:
        field = field.astype(np.float64)

    eval_loss, eval_grads, probe_grids = _gradcheck_scenario(field, loss_selector, seed, weights)
    analytic = eval_grads(field)
    base = abs(eval_loss(field))
    floor = 1e-6 * (1.0 + base)

    rng = np.random.default_rng(seed + 2)
    grid_names = sorted(probe_grids)
    per_grid = {name: 0.0 for name in grid_names}
    max_err = 0.0
    for probe in range(n_probes):
        name = grid_names[probe % len(grid_names)]
        grid = field.grids()[name]
        idx = tuple(rng.integers(0, s) for s in grid.shape)
        orig = grid[idx]
        grid[idx] = orig + h
        hi = eval_loss(field)
        grid[idx] = orig - h
        lo = eval_loss(field)
        grid[idx] = orig
        fd = (hi - lo) / (2.0 * h)
        an = float(analytic[name][idx])
        err = abs(an - fd) / max(abs(an), abs(fd), floor)
        per_grid[name] = max(per_grid[name], err)
        max_err = max(max_err, err)
    return GradCheckReport(
        selector=loss_selector,
        n_probes=n_probes,
        tolerance=tolerance,
        max_rel_err=max_err,
        passed=max_err <= tolerance,
        per_grid=per_grid,
    )
