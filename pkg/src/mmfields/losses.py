"""Training objectives and their hand-derived gradients.

Four terms drive reconstruction and decomposition:

* photometric: mean over rays of the squared L2 color error;
* distillation: per-modality mean squared L2 error against teacher features
  (the caller sums the two modalities into one scalar);
* modality alignment: 1 - cos(f_v, f_l) at sample points, averaged with the
  compositing weights, pulling the two feature branches onto a shared
  structure;
* patch contrastive: for pairs of rendered patches, the all-pairs pixel
  feature similarity S is pushed to agree with an appearance correspondence F
  (from a pluggable patch feature extractor) and a geometry correspondence G
  (inverse depth differences), via correlation scores against fixed biases for
  the most-/least-similar partner of each patch.

Correspondences F and G and the pair selection act as targets: gradients flow
through S (and, when requested, through the depth inside G) but never through
F or the selection itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LossWeights",
    "LossParts",
    "PatchBatch",
    "PairSelection",
    "ClGrads",
    "color_loss",
    "color_loss_grad",
    "distill_loss",
    "distill_loss_grad",
    "mms_loss",
    "mms_weighted_loss",
    "mms_weighted_grads",
    "feature_correspondence",
    "appearance_correspondence",
    "geometry_correspondence",
    "correlation",
    "select_pairs",
    "contrastive_loss",
    "joint_cl_loss",
    "joint_cl_grads",
    "total_loss",
]

_NORM_TINY = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights of the total objective and patch-scheme constants."""

    lambda_distill: float = 0.1
    lambda_mms: float = 0.01
    lambda_cl: float = 0.01
    lambda_v: float = 1.0
    lambda_l: float = 1.0
    lambda_app: float = 0.001
    lambda_geo: float = 0.01
    b_pos: float = 0.7
    b_neg: float = 0.3
    # 1/(|depth gap| + eps) must live on the same (0, 1] scale as the
    # appearance cosines it is paired with, or the biases lose meaning and
    # same-depth pixel pairs get pulled together regardless of identity
    eps_geo: float = 1.0
    patch_size: int = 8

    def __post_init__(self):
        for name in ("lambda_distill", "lambda_mms", "lambda_cl", "lambda_v", "lambda_l",
                     "lambda_app", "lambda_geo"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.eps_geo <= 0:
            raise ValueError("eps_geo must be positive")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")


@dataclass(frozen=True)
class LossParts:
    """Unweighted term values; ``distill`` is already summed over modalities."""

    color: float = 0.0
    distill: float = 0.0
    mms: float = 0.0
    cl: float = 0.0


def total_loss(parts: LossParts, weights: LossWeights) -> float:
    return (
        parts.color
        + weights.lambda_distill * parts.distill
        + weights.lambda_mms * parts.mms
        + weights.lambda_cl * parts.cl
    )


def color_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean over rays of the squared L2 color error."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    return float(np.mean(np.sum(diff * diff, axis=-1)))


def color_loss_grad(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    n = pred.shape[0] if pred.ndim > 1 else 1
    return 2.0 * (pred - gt) / n


def distill_loss(pred: np.ndarray, teacher: np.ndarray) -> float:
    """Mean over rays of the squared L2 feature error, one modality."""
    return color_loss(pred, teacher)


def distill_loss_grad(pred: np.ndarray, teacher: np.ndarray) -> np.ndarray:
    return color_loss_grad(pred, teacher)


def _normalize_rows(x: np.ndarray):
    """Unit rows; rows with norm < 1e-12 become zero (guarded everywhere)."""
    norm = np.linalg.norm(x, axis=-1)
    valid = norm >= _NORM_TINY
    safe = np.where(valid, norm, 1.0)
    return x / safe[..., None], norm, valid


def mms_loss(f_v: np.ndarray, f_l: np.ndarray) -> float:
    """1 - cos(f_v, f_l) for one sample point; 0 if either vector vanishes."""
    f_v, f_l = np.asarray(f_v, dtype=np.float64), np.asarray(f_l, dtype=np.float64)
    if f_v.shape != f_l.shape:
        raise ValueError("modality features must share one dimension for alignment")
    nv, nl = np.linalg.norm(f_v), np.linalg.norm(f_l)
    if nv < _NORM_TINY or nl < _NORM_TINY:
        return 0.0
    return float(1.0 - (f_v @ f_l) / (nv * nl))


def mms_weighted_loss(f_v: np.ndarray, f_l: np.ndarray, w: np.ndarray) -> float:
    """Compositing-weight-weighted mean of 1 - cos(f_v, f_l) over sample points."""
    value, _, _, _ = mms_weighted_grads(f_v, f_l, w)
    return value


def mms_weighted_grads(f_v: np.ndarray, f_l: np.ndarray, w: np.ndarray):
    """Value and gradients (d_f_v, d_f_l, d_w) of the weighted alignment term.

    With m_n = 1 - cos and W = sum(w): L = sum(w_n m_n) / W, so
    dL/dw_n = (m_n - L) / W and feature gradients scale by w_n / W.
    """
    f_v = np.asarray(f_v, dtype=np.float64)
    f_l = np.asarray(f_l, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if f_v.shape != f_l.shape:
        raise ValueError("modality features must share one dimension for alignment")
    if f_v.shape[:-1] != w.shape:
        raise ValueError("weights must match the sample layout")
    flat_v = f_v.reshape(-1, f_v.shape[-1])
    flat_l = f_l.reshape(-1, f_l.shape[-1])
    flat_w = w.reshape(-1)

    vh, nv, valid_v = _normalize_rows(flat_v)
    lh, nl, valid_l = _normalize_rows(flat_l)
    valid = valid_v & valid_l
    cos = np.einsum("nd,nd->n", vh, lh)
    m = np.where(valid, 1.0 - cos, 0.0)

    W = flat_w.sum()
    if W < _NORM_TINY:
        z = np.zeros_like
        return 0.0, z(f_v), z(f_l), z(w)
    value = float(flat_w @ m / W)

    coef = np.where(valid, flat_w / W, 0.0)[:, None]
    # d(1 - cos)/df_v = -(lh - cos * vh) / |f_v|
    d_v = -coef * (lh - cos[:, None] * vh) / np.where(valid_v, nv, 1.0)[:, None]
    d_l = -coef * (vh - cos[:, None] * lh) / np.where(valid_l, nl, 1.0)[:, None]
    d_w = (m - value) / W
    return value, d_v.reshape(f_v.shape), d_l.reshape(f_l.shape), d_w.reshape(w.shape)


@dataclass(frozen=True)
class PatchBatch:
    """Rendered patches from at least two distinct views.

    ``app`` holds the patch-extractor features of the rendered colors; like
    the pair selection it is an input, not a differentiable function of the
    field.
    """

    view_ids: np.ndarray  # (K,)
    rects: np.ndarray  # (K, 4) x, y, w, h in pixels
    feat_v: np.ndarray  # (K, P, P, d_v)
    feat_l: np.ndarray  # (K, P, P, d_l)
    rgb: np.ndarray  # (K, P, P, 3)
    depth: np.ndarray  # (K, P, P)
    app: np.ndarray  # (K, P, P, d_app)

    def __post_init__(self):
        k, p = self.feat_v.shape[0], self.feat_v.shape[1]
        if k < 2:
            raise ValueError("a patch batch needs at least two patches")
        if np.unique(np.asarray(self.view_ids)).size < 2:
            raise ValueError("patches must come from at least two distinct views")
        for name in ("feat_v", "feat_l", "rgb", "app"):
            arr = getattr(self, name)
            if arr.shape[:3] != (k, p, p):
                raise ValueError(f"{name} must be (K, P, P, *), got {arr.shape}")
        if self.depth.shape != (k, p, p):
            raise ValueError("depth must be (K, P, P)")

    @property
    def n_patches(self) -> int:
        return self.feat_v.shape[0]

    @property
    def patch_size(self) -> int:
        return self.feat_v.shape[1]


@dataclass(frozen=True)
class PairSelection:
    """For each patch, the index of its positive and negative partner."""

    positive: np.ndarray  # (K,)
    negative: np.ndarray  # (K,)


def select_pairs(batch: PatchBatch) -> PairSelection:
    """Most/least similar partner per patch by summed patch-level cosines.

    Patch descriptors are the L2-normalized pixel means of each modality; the
    score matrix is cos_v + cos_l. Self-pairs are excluded; ties resolve to
    the lowest index.
    """
    k = batch.n_patches
    score = np.zeros((k, k))
    for feats in (batch.feat_v, batch.feat_l):
        desc = feats.reshape(k, -1, feats.shape[-1]).mean(axis=1)
        unit, _, _ = _normalize_rows(desc)
        score += unit @ unit.T
    fill = np.diag(np.full(k, np.inf))
    positive = np.argmax(score - fill, axis=1)
    negative = np.argmin(score + fill, axis=1)
    return PairSelection(positive=positive, negative=negative)


def feature_correspondence(feat_a: np.ndarray, feat_b: np.ndarray) -> np.ndarray:
    """All-pairs pixel cosine similarity between two patches, (P*P, P*P)."""
    a = feat_a.reshape(-1, feat_a.shape[-1])
    b = feat_b.reshape(-1, feat_b.shape[-1])
    ah, _, _ = _normalize_rows(a)
    bh, _, _ = _normalize_rows(b)
    return ah @ bh.T


def appearance_correspondence(rgb_a: np.ndarray, rgb_b: np.ndarray, extractor) -> np.ndarray:
    """All-pairs cosine of extractor features of two color patches."""
    return feature_correspondence(extractor(rgb_a), extractor(rgb_b))


def geometry_correspondence(depth_a: np.ndarray, depth_b: np.ndarray, eps: float) -> np.ndarray:
    """G[i, j] = 1 / (|d_a[i] - d_b[j]| + eps) over flattened patch pixels."""
    da = depth_a.reshape(-1)
    db = depth_b.reshape(-1)
    return 1.0 / (np.abs(da[:, None] - db[None, :]) + eps)


def correlation(corr: np.ndarray, sim: np.ndarray, bias: float) -> float:
    """Negative bias-shifted correlation: -sum((corr - bias) * sim)."""
    if corr.shape != sim.shape:
        raise ValueError("correspondence and similarity shapes differ")
    return float(-np.sum((corr - bias) * sim))


@dataclass
class ClGrads:
    """Patch-contrastive value plus gradients w.r.t. the rendered inputs."""

    value: float
    parts: dict  # app_v, geo_v, app_l, geo_l (unweighted term values)
    d_feat_v: np.ndarray  # (K, P, P, d_v)
    d_feat_l: np.ndarray
    d_depth: np.ndarray | None  # (K, P, P); None unless requested


def _cl_core(batch: PatchBatch, pairs: PairSelection, weights: LossWeights, need_depth: bool):
    k = batch.n_patches
    n = batch.patch_size ** 2
    flat = {
        "v": batch.feat_v.reshape(k, n, -1),
        "l": batch.feat_l.reshape(k, n, -1),
    }
    unit, norm, valid = {}, {}, {}
    for m in ("v", "l"):
        unit[m], norm[m], valid[m] = _normalize_rows(flat[m])
    ah, _, _ = _normalize_rows(batch.app.reshape(k, n, -1))
    depth = batch.depth.reshape(k, n)
    lam = {"v": weights.lambda_v, "l": weights.lambda_l}

    parts = {"app_v": 0.0, "geo_v": 0.0, "app_l": 0.0, "geo_l": 0.0}
    d_unit = {m: np.zeros_like(unit[m]) for m in ("v", "l")}
    d_depth = np.zeros_like(depth) if need_depth else None

    for a in range(k):
        for partner, bias in ((int(pairs.positive[a]), weights.b_pos),
                              (int(pairs.negative[a]), weights.b_neg)):
            F = ah[a] @ ah[partner].T
            dd = depth[a][:, None] - depth[partner][None, :]
            absd = np.abs(dd) + weights.eps_geo
            G = 1.0 / absd
            S = {m: unit[m][a] @ unit[m][partner].T for m in ("v", "l")}
            for m in ("v", "l"):
                parts[f"app_{m}"] += -np.sum((F - bias) * S[m]) / k
                parts[f"geo_{m}"] += -np.sum((G - bias) * S[m]) / k
                # dL/dS for this pair, all weights folded in except lambda_cl.
                w_s = -(lam[m] / k) * (
                    weights.lambda_app * (F - bias) + weights.lambda_geo * (G - bias)
                )
                d_unit[m][a] += w_s @ unit[m][partner]
                d_unit[m][partner] += w_s.T @ unit[m][a]
            if need_depth:
                d_g = -(weights.lambda_geo / k) * (lam["v"] * S["v"] + lam["l"] * S["l"])
                slope = d_g * (-np.sign(dd) / (absd * absd))
                d_depth[a] += slope.sum(axis=1)
                d_depth[partner] -= slope.sum(axis=0)

    value = 0.0
    for m in ("v", "l"):
        value += lam[m] * (
            weights.lambda_app * parts[f"app_{m}"] + weights.lambda_geo * parts[f"geo_{m}"]
        )

    d_feat = {}
    for m in ("v", "l"):
        g = d_unit[m]
        proj = np.einsum("knd,knd->kn", g, unit[m])[..., None]
        safe = np.where(valid[m], norm[m], 1.0)[..., None]
        d_feat[m] = np.where(valid[m][..., None], (g - proj * unit[m]) / safe, 0.0)

    return ClGrads(
        value=float(value),
        parts=parts,
        d_feat_v=d_feat["v"].reshape(batch.feat_v.shape),
        d_feat_l=d_feat["l"].reshape(batch.feat_l.shape),
        d_depth=None if d_depth is None else d_depth.reshape(batch.depth.shape),
    )


def contrastive_loss(
    batch: PatchBatch, pairs: PairSelection, weights: LossWeights, modality: str
) -> float:
    """lambda_app * L_app + lambda_geo * L_geo for one modality, mean over patches."""
    if modality not in ("visual", "language"):
        raise ValueError("modality must be 'visual' or 'language'")
    res = _cl_core(batch, pairs, weights, need_depth=False)
    m = "v" if modality == "visual" else "l"
    return weights.lambda_app * res.parts[f"app_{m}"] + weights.lambda_geo * res.parts[f"geo_{m}"]


def joint_cl_loss(batch: PatchBatch, pairs: PairSelection, weights: LossWeights) -> float:
    """lambda_v * (visual contrastive) + lambda_l * (language contrastive)."""
    return _cl_core(batch, pairs, weights, need_depth=False).value


def joint_cl_grads(
    batch: PatchBatch, pairs: PairSelection, weights: LossWeights, need_depth: bool = False
) -> ClGrads:
    """Joint contrastive value and gradients w.r.t. rendered patch inputs.

    ``need_depth`` additionally differentiates through the depths inside the
    geometry correspondence (used by the gradient checker; training treats
    geometry as a target).
    """
    return _cl_core(batch, pairs, weights, need_depth=need_depth)
