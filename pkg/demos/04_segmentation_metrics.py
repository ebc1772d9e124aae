"""Unsupervised segmentation and the metrics toolbox.

Clusters rendered visual features of the trained demo run with k-means,
scores the split against ground truth, and demonstrates PSNR/SSIM/IoU and
the PCA teacher-reduction helper on synthetic data.

Run:  python3 demos/04_segmentation_metrics.py
"""

import subprocess
import sys
from pathlib import Path

import numpy as np

from mmfields.data import pca_reduce
from mmfields.metrics import iou, psnr, ssim
from mmfields.pipeline import encode_png, load_run, segment_miou, segment_view

OUT = Path(__file__).parent / "out"
RUN = OUT / "demo_run"

if not (RUN / "checkpoint.ckpt").exists():
    print("no trained run yet; running the training demo first...")
    subprocess.run([sys.executable, str(Path(__file__).parent / "02_train_synthetic.py")],
                   check=True)

ctx = load_run(RUN)
ds = ctx.dataset

# --- k-means over rendered features --------------------------------------------
for view in ds.test_views:
    seg = segment_view(ctx, view, k=2, seed=0, n_samples=96)
    gt_fg = ds.masks["ball"][view] | ds.masks["box"][view]
    score, fg_cluster = segment_miou(seg, gt_fg)
    print(f"view {view}: 2-means foreground/background mIoU {score:.3f} "
          f"(cluster {fg_cluster} is foreground)")
    shade = (seg.labels + 1) / 2.0
    (OUT / f"segmentation_{view}.png").write_bytes(encode_png(np.clip(shade, 0, 1)))

# --- metric sanity on known inputs ----------------------------------------------
gt = np.zeros((32, 32, 3))
print(f"\npsnr(gt + 0.1, gt) = {psnr(gt + 0.1, gt):.1f} dB (uniform 0.1 error -> 20 dB)")
img = np.random.default_rng(0).random((32, 32, 3))
print(f"ssim(img, img) = {ssim(img, img):.3f}")
noisy = np.clip(img + 0.2 * np.random.default_rng(1).normal(size=img.shape), 0, 1)
print(f"ssim(img, noisy) = {ssim(img, noisy):.3f}")
a = np.zeros((8, 8), bool)
a[:4] = True
b = np.zeros((8, 8), bool)
b[2:6] = True
print(f"iou(half, shifted half) = {iou(a, b):.3f}")

# --- PCA reduction of high-dimensional teacher features -------------------------
# imitate a 64-d teacher whose variance lives in 3 directions
rng = np.random.default_rng(5)
basis = rng.normal(size=(3, 64))
feats = rng.normal(size=(500, 3)) @ basis + 0.01 * rng.normal(size=(500, 64))
reduced, pca = pca_reduce(feats, 8)
var = reduced.var(axis=0)
print(f"\nPCA on rank-3 teacher features: leading variances {np.round(var[:4], 4)}")
print("   (three dominant axes, the rest is the 1% noise floor)")
