import numpy as np
import pytest

from mmfields.metrics import binary_miou, iou, psnr, ssim


class TestPsnr:
    def test_hand_value(self):
        gt = np.zeros((8, 8, 3))
        pred = np.full((8, 8, 3), 0.1)
        assert psnr(pred, gt) == pytest.approx(20.0, abs=1e-12)

    def test_identical_caps(self):
        img = np.random.default_rng(0).random((4, 4))
        assert psnr(img, img) == 99.0

    def test_monotone_in_error(self):
        gt = np.zeros((8, 8))
        assert psnr(gt + 0.01, gt) > psnr(gt + 0.1, gt)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((3, 2)))


def brute_force_ssim_gray(x, y, win=11, sigma=1.5, k1=0.01, k2=0.03):
    """Windowed reference implementation with explicit loops."""
    r = np.arange(win) - (win - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    kern = np.outer(g, g)
    kern /= kern.sum()
    c1, c2 = k1**2, k2**2
    h, w = x.shape
    vals = []
    for i in range(h - win + 1):
        for j in range(w - win + 1):
            px = x[i : i + win, j : j + win]
            py = y[i : i + win, j : j + win]
            mx = (kern * px).sum()
            my = (kern * py).sum()
            vx = (kern * px * px).sum() - mx * mx
            vy = (kern * py * py).sum() - my * my
            vxy = (kern * px * py).sum() - mx * my
            vals.append(
                ((2 * mx * my + c1) * (2 * vxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2))
            )
    return float(np.mean(vals))


class TestSsim:
    def test_identical_is_one(self):
        img = np.random.default_rng(1).random((16, 16, 3))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.random((16, 18))
        y = np.clip(x + 0.1 * rng.normal(size=x.shape), 0, 1)
        assert ssim(x, y) == pytest.approx(brute_force_ssim_gray(x, y), abs=1e-12)

    def test_channels_average(self):
        rng = np.random.default_rng(3)
        x = rng.random((14, 14))
        y = rng.random((14, 14))
        mono = ssim(x, y)
        stacked = ssim(np.stack([x, x, x], axis=-1), np.stack([y, y, y], axis=-1))
        assert stacked == pytest.approx(mono, abs=1e-12)

    def test_noise_lowers_score(self):
        rng = np.random.default_rng(4)
        x = rng.random((20, 20))
        y = np.clip(x + 0.3 * rng.normal(size=x.shape), 0, 1)
        assert ssim(x, y) < ssim(x, np.clip(x + 0.01, 0, 1))

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestIou:
    def test_hand_values(self):
        a = np.array([1, 1, 0, 0], dtype=bool)
        b = np.array([1, 0, 1, 0], dtype=bool)
        assert iou(a, b) == pytest.approx(1.0 / 3.0)

    def test_disjoint(self):
        assert iou(np.array([True, False]), np.array([False, True])) == 0.0

    def test_empty_union(self):
        assert iou(np.zeros(4, bool), np.zeros(4, bool)) == 1.0

    def test_identical(self):
        m = np.array([[True, False], [True, True]])
        assert iou(m, m) == 1.0


class TestBinaryMiou:
    def test_perfect(self):
        gt = np.array([[True, False], [True, False]])
        pred = gt.astype(int)
        score, fg = binary_miou(pred, gt)
        assert score == 1.0 and fg == 1

    def test_inverted_labels(self):
        gt = np.array([[True, False], [True, False]])
        pred = 1 - gt.astype(int)
        score, fg = binary_miou(pred, gt)
        assert score == 1.0 and fg == 0

    def test_hand_value(self):
        gt = np.array([True, True, False, False])
        pred = np.array([1, 0, 0, 0])
        # fg=1: iou_fg=1/2, iou_bg=2/3 -> 7/12; fg=0: iou_fg=1/3, iou_bg=0
        score, fg = binary_miou(pred, gt)
        assert fg == 1
        assert score == pytest.approx(7.0 / 12.0)
