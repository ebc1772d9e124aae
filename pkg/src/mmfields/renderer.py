"""Differentiable volume rendering over voxel field sets.

Compositing follows the standard emission-absorption quadrature: for samples
i = 1..S along a ray with densities sigma_i and segment lengths delta_i,

    T_i = exp(-sum_{j<i} sigma_j delta_j),  alpha_i = 1 - exp(-sigma_i delta_i),
    w_i = T_i alpha_i,

and every payload (color, both feature branches, depth via t_i) is accumulated
as sum_i w_i p_i against a black background. The same weights w_i are shared
by all payloads of a ray.

The backward pass is hand-derived. With g_i := dL/dw_i,

    dL/dsigma_k = delta_k * ( g_k T_{k+1} - sum_{i>k} g_i w_i ),

where T_{k+1} = T_k (1 - alpha_k); payload gradients are simply w_i * dL/dout.
Gradients reach the grids through the transpose of the trilinear gather
matrix. Rays are clipped to the field bounding box (intersected with the
caller's near/far), so samples never straddle empty exterior space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import (
    FieldConfig,
    VoxelFieldSet,
    interp_matrix,
    sigmoid,
    sigmoid_grad,
    softplus,
    softplus_grad,
)
from .geometry import CameraModel, SegmentSet, pixel_grid_rays

__all__ = [
    "CompositeTrace",
    "RayOutput",
    "FrameOutput",
    "RayBundle",
    "RayForward",
    "Upstream",
    "composite",
    "composite_weights",
    "composite_payload",
    "composite_sigma_backward",
    "make_ray_bundle",
    "forward_rays",
    "backward_rays",
    "render_view",
]


@dataclass(frozen=True)
class CompositeTrace:
    """Per-sample alpha, transmittance, and weight for one ray."""

    alpha: np.ndarray
    trans: np.ndarray
    weight: np.ndarray
    trans_final: float


@dataclass(frozen=True)
class RayOutput:
    color_hat: np.ndarray
    feat_v_hat: np.ndarray
    feat_l_hat: np.ndarray
    depth: float
    opacity: float
    trace: CompositeTrace


@dataclass(frozen=True)
class FrameOutput:
    """Full-frame render; all planes share the camera's H x W layout."""

    rgb: np.ndarray
    feat_v: np.ndarray
    feat_l: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray


def composite_weights(sigma: np.ndarray, delta: np.ndarray):
    """Alpha/transmittance/weights for (R, S) density and segment arrays.

    Transmittance is the running product of exp(-sigma delta), which keeps
    sum_i w_i + T_final = 1 to machine precision.
    """
    tau = sigma * delta
    seg_trans = np.exp(-tau)
    alpha = -np.expm1(-tau)
    if sigma.shape[1] == 0:
        trans = np.ones_like(sigma)
        trans_final = np.ones(sigma.shape[0], dtype=sigma.dtype)
    else:
        cum = np.cumprod(seg_trans, axis=1)
        trans = np.concatenate([np.ones_like(cum[:, :1]), cum[:, :-1]], axis=1)
        trans_final = cum[:, -1]
    weight = trans * alpha
    return alpha, trans, weight, trans_final, seg_trans


def composite_payload(weight: np.ndarray, payload: np.ndarray) -> np.ndarray:
    """Accumulate (R, S, C) payloads with (R, S) weights into (R, C)."""
    return np.einsum("rs,rsc->rc", weight, payload)


def composite_sigma_backward(
    g_w: np.ndarray,
    weight: np.ndarray,
    trans: np.ndarray,
    seg_trans: np.ndarray,
    delta: np.ndarray,
) -> np.ndarray:
    """dL/dsigma given dL/dw (all (R, S)); see the module docstring."""
    s = g_w * weight
    if s.shape[1] == 0:
        return np.zeros_like(s)
    suffix = np.cumsum(s[:, ::-1], axis=1)[:, ::-1] - s  # sum over i > k
    return delta * (g_w * trans * seg_trans - suffix)


def composite(samples, segs: SegmentSet) -> RayOutput:
    """Composite a sequence of FieldSamples along one ray.

    Empty input yields all-zero payloads and opacity 0.
    """
    if len(samples) != len(segs):
        raise ValueError(f"{len(samples)} samples but {len(segs)} segments")
    if len(samples) == 0:
        trace = CompositeTrace(np.empty(0), np.empty(0), np.empty(0), 1.0)
        return RayOutput(np.zeros(3), np.zeros(0), np.zeros(0), 0.0, 0.0, trace)
    sigma = np.array([s.sigma for s in samples], dtype=np.float64)[None, :]
    delta = segs.delta[None, :]
    alpha, trans, weight, trans_final, _ = composite_weights(sigma, delta)
    color = np.stack([s.color for s in samples])[None]
    f_v = np.stack([s.f_v for s in samples])[None]
    f_l = np.stack([s.f_l for s in samples])[None]
    depth = float(weight[0] @ segs.t_mid)
    trace = CompositeTrace(alpha[0], trans[0], weight[0], float(trans_final[0]))
    return RayOutput(
        color_hat=composite_payload(weight, color)[0],
        feat_v_hat=composite_payload(weight, f_v)[0],
        feat_l_hat=composite_payload(weight, f_l)[0],
        depth=depth,
        opacity=1.0 - float(trans_final[0]),
        trace=trace,
    )


@dataclass
class RayBundle:
    """Fixed sampling geometry for a batch of rays (reusable across fields)."""

    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3) unit
    t: np.ndarray  # (R, S) segment midpoints (or jittered samples)
    delta: np.ndarray  # (R, S) segment lengths, 0 where the ray misses the box
    gather: object  # csr (R*S, V) trilinear gather matrix
    n_rays: int
    n_samples: int


def _clip_to_box(origins, dirs, bbox_min, bbox_max, near, far):
    """Entry/exit distances of each ray against the bbox, clamped to [near, far]."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_a = (bbox_min - origins) * inv
        t_b = (bbox_max - origins) * inv
    lo = np.minimum(t_a, t_b)
    hi = np.maximum(t_a, t_b)
    # Axis-parallel rays: inside the slab -> unbounded, outside -> empty.
    par = dirs == 0.0
    if np.any(par):
        inside = (origins >= bbox_min) & (origins <= bbox_max)
        lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t0 = np.maximum(lo.max(axis=1), near)
    t1 = np.minimum(hi.min(axis=1), far)
    return t0, t1


def make_ray_bundle(
    config: FieldConfig,
    origins: np.ndarray,
    dirs: np.ndarray,
    n_samples: int,
    jitter_u: np.ndarray | None = None,
    near: float = 0.0,
    far: float = np.inf,
) -> RayBundle:
    """Sample ``n_samples`` stratified points per ray inside the field bbox.

    ``jitter_u``: optional (R, S) uniforms in [0, 1) placing each sample in its
    bin; None means bin midpoints. Rays that miss the box get delta = 0 rows,
    which composite to the background.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n_rays = origins.shape[0]
    if n_samples < 1:
        raise ValueError("need at least one sample per ray")
    t0, t1 = _clip_to_box(
        origins, dirs, np.array(config.bbox_min), np.array(config.bbox_max), near, far
    )
    hit = t1 > t0
    t0 = np.where(hit, t0, near)
    t1 = np.where(hit, t1, near)
    span = t1 - t0
    step = span / n_samples
    k = np.arange(n_samples)
    u = np.full((n_rays, n_samples), 0.5) if jitter_u is None else np.asarray(jitter_u)
    t = t0[:, None] + (k[None, :] + u) * step[:, None]
    delta = np.broadcast_to(step[:, None], t.shape).copy()
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    gather, _ = interp_matrix(config, pts.reshape(-1, 3))
    return RayBundle(
        origins=origins,
        dirs=dirs,
        t=t,
        delta=delta,
        gather=gather,
        n_rays=n_rays,
        n_samples=n_samples,
    )


@dataclass
class RayForward:
    """Everything the backward pass needs, kept from one forward evaluation."""

    density_raw: np.ndarray  # (R, S) interpolated raw density
    sigma: np.ndarray
    alpha: np.ndarray
    trans: np.ndarray
    seg_trans: np.ndarray
    weight: np.ndarray
    trans_final: np.ndarray
    color_raw: np.ndarray | None  # (R, S, 3)
    color: np.ndarray | None
    f_v: np.ndarray | None  # (R, S, d_v)
    f_l: np.ndarray | None
    color_hat: np.ndarray | None  # (R, 3)
    feat_v_hat: np.ndarray | None
    feat_l_hat: np.ndarray | None
    depth: np.ndarray  # (R,)
    opacity: np.ndarray


def forward_rays(
    field: VoxelFieldSet,
    bundle: RayBundle,
    with_color: bool = True,
    with_feats: bool = True,
) -> RayForward:
    cfg = field.config
    R, S = bundle.n_rays, bundle.n_samples
    M = bundle.gather
    density_raw = (M @ field.density_raw.reshape(-1)).reshape(R, S)
    sigma = softplus(density_raw)
    alpha, trans, weight, trans_final, seg_trans = composite_weights(sigma, bundle.delta)
    depth = np.einsum("rs,rs->r", weight, bundle.t)
    opacity = 1.0 - trans_final

    color_raw = color = color_hat = None
    f_v = f_l = fv_hat = fl_hat = None
    if with_color:
        color_raw = (M @ field.color_raw.reshape(-1, 3)).reshape(R, S, 3)
        color = sigmoid(color_raw)
        color_hat = composite_payload(weight, color)
    if with_feats:
        f_v = (M @ field.feat_v.reshape(-1, cfg.d_v)).reshape(R, S, cfg.d_v)
        f_l = (M @ field.feat_l.reshape(-1, cfg.d_l)).reshape(R, S, cfg.d_l)
        fv_hat = composite_payload(weight, f_v)
        fl_hat = composite_payload(weight, f_l)
    return RayForward(
        density_raw=density_raw,
        sigma=sigma,
        alpha=alpha,
        trans=trans,
        seg_trans=seg_trans,
        weight=weight,
        trans_final=trans_final,
        color_raw=color_raw,
        color=color,
        f_v=f_v,
        f_l=f_l,
        color_hat=color_hat,
        feat_v_hat=fv_hat,
        feat_l_hat=fl_hat,
        depth=depth,
        opacity=opacity,
    )


@dataclass
class Upstream:
    """Gradients of the loss w.r.t. ray-level outputs; any entry may be None.

    d_weight covers losses that touch compositing weights directly (the
    modality-alignment term); d_f_v/d_f_l cover per-sample feature terms.
    """

    d_color_hat: np.ndarray | None = None  # (R, 3)
    d_feat_v_hat: np.ndarray | None = None  # (R, d_v)
    d_feat_l_hat: np.ndarray | None = None  # (R, d_l)
    d_depth: np.ndarray | None = None  # (R,)
    d_weight: np.ndarray | None = None  # (R, S)
    d_f_v: np.ndarray | None = None  # (R, S, d_v)
    d_f_l: np.ndarray | None = None  # (R, S, d_l)


def backward_rays(
    field: VoxelFieldSet,
    bundle: RayBundle,
    fwd: RayForward,
    up: Upstream,
    train: set[str],
    detach_feature_density: bool = True,
) -> dict[str, np.ndarray]:
    """Grid gradients for the requested grids.

    ``detach_feature_density`` keeps feature-side losses (features, depth,
    direct weight terms) from pulling on the density grid; the photometric
    path always reaches density. Turn it off to check the full chain against
    finite differences.
    """
    cfg = field.config
    R, S = bundle.n_rays, bundle.n_samples
    M = bundle.gather
    grads: dict[str, np.ndarray] = {}

    g_w_photo = np.zeros((R, S))
    g_w_sem = np.zeros((R, S))
    if up.d_color_hat is not None:
        g_w_photo += np.einsum("rc,rsc->rs", up.d_color_hat, fwd.color)
    if up.d_feat_v_hat is not None:
        g_w_sem += np.einsum("rc,rsc->rs", up.d_feat_v_hat, fwd.f_v)
    if up.d_feat_l_hat is not None:
        g_w_sem += np.einsum("rc,rsc->rs", up.d_feat_l_hat, fwd.f_l)
    if up.d_depth is not None:
        g_w_sem += up.d_depth[:, None] * bundle.t
    if up.d_weight is not None:
        g_w_sem += up.d_weight

    if "density" in train:
        g_w = g_w_photo if detach_feature_density else g_w_photo + g_w_sem
        d_sigma = composite_sigma_backward(g_w, fwd.weight, fwd.trans, fwd.seg_trans, bundle.delta)
        d_raw = d_sigma * softplus_grad(fwd.density_raw)
        grads["density"] = (M.T @ d_raw.reshape(-1)).reshape(cfg.resolution)

    if "color" in train and up.d_color_hat is not None:
        d_color = fwd.weight[..., None] * up.d_color_hat[:, None, :]
        d_raw = d_color * sigmoid_grad(fwd.color_raw)
        grads["color"] = (M.T @ d_raw.reshape(R * S, 3)).reshape(cfg.grid_shape("color"))

    if "feat_v" in train:
        d_f = np.zeros((R, S, cfg.d_v))
        if up.d_feat_v_hat is not None:
            d_f += fwd.weight[..., None] * up.d_feat_v_hat[:, None, :]
        if up.d_f_v is not None:
            d_f += up.d_f_v
        grads["feat_v"] = (M.T @ d_f.reshape(R * S, cfg.d_v)).reshape(cfg.grid_shape("feat_v"))

    if "feat_l" in train:
        d_f = np.zeros((R, S, cfg.d_l))
        if up.d_feat_l_hat is not None:
            d_f += fwd.weight[..., None] * up.d_feat_l_hat[:, None, :]
        if up.d_f_l is not None:
            d_f += up.d_f_l
        grads["feat_l"] = (M.T @ d_f.reshape(R * S, cfg.d_l)).reshape(cfg.grid_shape("feat_l"))

    return grads


def render_view(
    field: VoxelFieldSet,
    camera: CameraModel,
    n_samples: int,
    jitter: bool = False,
    seed: int = 0,
    near: float = 0.0,
    far: float = np.inf,
    features: bool = True,
    chunk: int = 8192,
) -> FrameOutput:
    """Render every pixel of ``camera``. Deterministic for a fixed seed.

    Jitter uniforms are drawn for the whole frame up front, so the output does
    not depend on ``chunk``.
    """
    cfg = field.config
    H, W = camera.height, camera.width
    origins, dirs = pixel_grid_rays(camera)
    n = origins.shape[0]
    jitter_u = np.random.default_rng(seed).uniform(size=(n, n_samples)) if jitter else None

    rgb = np.zeros((n, 3))
    f_v = np.zeros((n, cfg.d_v if features else 0))
    f_l = np.zeros((n, cfg.d_l if features else 0))
    depth = np.zeros(n)
    opacity = np.zeros(n)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        bundle = make_ray_bundle(
            cfg,
            origins[lo:hi],
            dirs[lo:hi],
            n_samples,
            jitter_u=None if jitter_u is None else jitter_u[lo:hi],
            near=near,
            far=far,
        )
        fwd = forward_rays(field, bundle, with_color=True, with_feats=features)
        rgb[lo:hi] = fwd.color_hat
        if features:
            f_v[lo:hi] = fwd.feat_v_hat
            f_l[lo:hi] = fwd.feat_l_hat
        depth[lo:hi] = fwd.depth
        opacity[lo:hi] = fwd.opacity
    return FrameOutput(
        rgb=rgb.reshape(H, W, 3),
        feat_v=f_v.reshape(H, W, f_v.shape[1]),
        feat_l=f_l.reshape(H, W, f_l.shape[1]),
        depth=depth.reshape(H, W),
        opacity=opacity.reshape(H, W),
    )
