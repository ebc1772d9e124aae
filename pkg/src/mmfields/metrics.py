"""Image and mask quality metrics.

These are deliberately self-contained (no image-library dependency) so that
every evaluation number in reports is reproducible bit-for-bit: fixed window,
fixed constants, float64 throughout, fixed reduction order.
"""

from __future__ import annotations

import numpy as np

__all__ = ["psnr", "ssim", "iou", "binary_miou"]

PSNR_CAP = 99.0


def psnr(pred: np.ndarray, gt: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images cap at 99."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(data_range * data_range / mse))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(
    pred: np.ndarray,
    gt: np.ndarray,
    data_range: float = 1.0,
    win: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Only fully valid windows enter the mean; multi-channel inputs average the
    per-channel scores.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred = pred[..., None]
        gt = gt[..., None]
    if pred.ndim != 3:
        raise ValueError("images must be (H, W) or (H, W, C)")
    h, w = pred.shape[:2]
    if h < win or w < win:
        raise ValueError(f"images must be at least {win}x{win}")
    kernel = _gaussian_kernel(win, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    scores = []
    for ch in range(pred.shape[2]):
        x = pred[..., ch]
        y = gt[..., ch]
        wx = np.lib.stride_tricks.sliding_window_view(x, (win, win))
        wy = np.lib.stride_tricks.sliding_window_view(y, (win, win))
        mu_x = np.einsum("ijkl,kl->ij", wx, kernel)
        mu_y = np.einsum("ijkl,kl->ij", wy, kernel)
        xx = np.einsum("ijkl,kl->ij", wx * wx, kernel) - mu_x * mu_x
        yy = np.einsum("ijkl,kl->ij", wy * wy, kernel) - mu_y * mu_y
        xy = np.einsum("ijkl,kl->ij", wx * wy, kernel) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; empty union gives 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def binary_miou(pred_labels: np.ndarray, gt_fg: np.ndarray):
    """Best-permutation mean IoU for a two-way clustering against a FG mask.

    Returns (miou, fg_label): the cluster id that plays foreground under the
    better of the two possible label assignments.
    """
    pred_labels = np.asarray(pred_labels)
    gt_fg = np.asarray(gt_fg, dtype=bool)
    if pred_labels.shape != gt_fg.shape:
        raise ValueError("shape mismatch")
    best = (-1.0, 0)
    for fg_label in (0, 1):
        pred_fg = pred_labels == fg_label
        score = 0.5 * (iou(pred_fg, gt_fg) + iou(~pred_fg, ~gt_fg))
        if score > best[0]:
            best = (score, fg_label)
    return best
