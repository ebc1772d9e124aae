import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmfields.losses import (
    ClGrads,
    LossParts,
    LossWeights,
    PatchBatch,
    PairSelection,
    appearance_correspondence,
    color_loss,
    color_loss_grad,
    contrastive_loss,
    correlation,
    distill_loss,
    distill_loss_grad,
    feature_correspondence,
    geometry_correspondence,
    joint_cl_grads,
    joint_cl_loss,
    mms_loss,
    mms_weighted_grads,
    mms_weighted_loss,
    select_pairs,
    total_loss,
)


def make_batch(rng, k=4, p=3, d_v=5, d_l=4, d_app=3, views=(0, 1)):
    view_ids = np.array([views[i % len(views)] for i in range(k)])
    return PatchBatch(
        view_ids=view_ids,
        rects=np.zeros((k, 4), dtype=np.int64),
        feat_v=rng.normal(size=(k, p, p, d_v)),
        feat_l=rng.normal(size=(k, p, p, d_l)),
        rgb=rng.uniform(0, 1, size=(k, p, p, 3)),
        depth=rng.uniform(0.5, 3.0, size=(k, p, p)),
        app=rng.normal(size=(k, p, p, d_app)),
    )


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda_distill, w.lambda_mms, w.lambda_cl) == (0.1, 0.01, 0.01)
        assert (w.lambda_v, w.lambda_l) == (1.0, 1.0)
        assert (w.lambda_app, w.lambda_geo) == (0.001, 0.01)
        assert (w.b_pos, w.b_neg) == (0.7, 0.3)
        assert w.eps_geo == 1.0
        assert w.patch_size == 8

    def test_validation(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_mms=-0.1)
        with pytest.raises(ValueError):
            LossWeights(eps_geo=0.0)
        with pytest.raises(ValueError):
            LossWeights(patch_size=0)


class TestSimpleLosses:
    def test_color_loss_hand_value(self):
        # One ray, error (1, 0, 0): squared L2 = 1.
        assert color_loss(np.array([[1.0, 0, 0]]), np.zeros((1, 3))) == 1.0

    def test_color_loss_mean_over_rays(self):
        pred = np.array([[1.0, 0, 0], [0, 0, 0]])
        gt = np.zeros((2, 3))
        assert color_loss(pred, gt) == 0.5

    def test_color_grad_matches_fd(self):
        rng = np.random.default_rng(0)
        pred = rng.normal(size=(6, 3))
        gt = rng.normal(size=(6, 3))
        grad = color_loss_grad(pred, gt)
        h = 1e-6
        for idx in [(0, 0), (3, 2), (5, 1)]:
            p = pred.copy()
            p[idx] += h
            hi = color_loss(p, gt)
            p[idx] -= 2 * h
            lo = color_loss(p, gt)
            assert abs((hi - lo) / (2 * h) - grad[idx]) < 1e-7

    def test_distill_matches_color_form(self):
        rng = np.random.default_rng(1)
        pred, teach = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
        assert distill_loss(pred, teach) == color_loss(pred, teach)
        np.testing.assert_array_equal(
            distill_loss_grad(pred, teach), color_loss_grad(pred, teach)
        )

    def test_total_loss_defaults(self):
        parts = LossParts(color=1.0, distill=1.0, mms=1.0, cl=1.0)
        assert abs(total_loss(parts, LossWeights()) - 1.12) < 1e-12


class TestMms:
    def test_identical_vectors(self):
        v = np.array([0.3, -0.2, 0.9])
        assert mms_loss(v, 2.5 * v) < 1e-12

    def test_orthogonal_vectors(self):
        assert abs(mms_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0])) - 1.0) < 1e-12

    def test_zero_norm_guard(self):
        assert mms_loss(np.zeros(3), np.array([1.0, 0, 0])) == 0.0
        assert mms_loss(np.array([1e-13, 0, 0]), np.array([1.0, 0, 0])) == 0.0

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            mms_loss(np.ones(3), np.ones(4))

    def test_weighted_mean_matches_loop(self):
        rng = np.random.default_rng(2)
        fv = rng.normal(size=(10, 4))
        fl = rng.normal(size=(10, 4))
        fv[3] = 0.0  # guarded row
        w = rng.uniform(0, 1, size=10)
        want = sum(w[i] * mms_loss(fv[i], fl[i]) for i in range(10)) / w.sum()
        assert abs(mms_weighted_loss(fv, fl, w) - want) < 1e-12

    def test_zero_weights_give_zero(self):
        fv = np.ones((4, 3))
        fl = np.ones((4, 3))
        assert mms_weighted_loss(fv, fl, np.zeros(4)) == 0.0

    def test_grads_match_fd(self):
        rng = np.random.default_rng(3)
        fv = rng.normal(size=(6, 4))
        fl = rng.normal(size=(6, 4))
        w = rng.uniform(0.1, 1.0, size=6)
        _, d_v, d_l, d_w = mms_weighted_grads(fv, fl, w)
        h = 1e-6

        def probe(arr, grad, *idx):
            orig = arr[idx]
            arr[idx] = orig + h
            hi = mms_weighted_loss(fv, fl, w)
            arr[idx] = orig - h
            lo = mms_weighted_loss(fv, fl, w)
            arr[idx] = orig
            fd = (hi - lo) / (2 * h)
            assert abs(fd - grad[idx]) < 1e-7, (idx, fd, grad[idx])

        for i, j in [(0, 0), (2, 3), (5, 1)]:
            probe(fv, d_v, i, j)
            probe(fl, d_l, i, j)
        for i in range(6):
            probe(w, d_w, i)


class TestCorrespondences:
    def test_feature_correspondence_brute_force(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(2, 2, 3))
        b = rng.normal(size=(2, 2, 3))
        s = feature_correspondence(a, b)
        af, bf = a.reshape(4, 3), b.reshape(4, 3)
        for i in range(4):
            for j in range(4):
                want = af[i] @ bf[j] / (np.linalg.norm(af[i]) * np.linalg.norm(bf[j]))
                assert abs(s[i, j] - want) < 1e-12

    def test_zero_pixel_rows_are_zero(self):
        a = np.zeros((1, 1, 3))
        b = np.ones((1, 1, 3))
        assert feature_correspondence(a, b)[0, 0] == 0.0

    def test_appearance_uses_extractor(self):
        rgb_a = np.zeros((1, 1, 3))
        rgb_b = np.ones((1, 1, 3))
        f = appearance_correspondence(rgb_a, rgb_b, lambda x: x + 1.0)
        # Extractor output: (1,1,1) vs (2,2,2) -> cosine 1.
        assert abs(f[0, 0] - 1.0) < 1e-12

    def test_geometry_brute_force_and_symmetry(self):
        rng = np.random.default_rng(5)
        da = rng.uniform(0, 3, size=(2, 2))
        db = rng.uniform(0, 3, size=(2, 2))
        eps = 1e-2
        g = geometry_correspondence(da, db, eps)
        for i in range(4):
            for j in range(4):
                want = 1.0 / (abs(da.reshape(-1)[i] - db.reshape(-1)[j]) + eps)
                assert abs(g[i, j] - want) < 1e-12
        np.testing.assert_allclose(g, geometry_correspondence(db, da, eps).T, atol=1e-15)

    def test_geometry_peak_at_equal_depth(self):
        g = geometry_correspondence(np.array([[1.0]]), np.array([[1.0]]), 1e-2)
        assert abs(g[0, 0] - 100.0) < 1e-9


class TestCorrelation:
    def test_hand_value_single_pixel(self):
        # -(0.9 - 0.4) * 0.7 = -0.35
        f = np.array([[0.9]])
        s = np.array([[0.7]])
        assert abs(correlation(f, s, 0.4) + 0.35) < 1e-12

    def test_matches_quadruple_loop(self):
        rng = np.random.default_rng(6)
        p = 4
        fa = rng.normal(size=(p, p, 3))
        fb = rng.normal(size=(p, p, 3))
        da = rng.uniform(0, 2, size=(p, p))
        db = rng.uniform(0, 2, size=(p, p))
        s = feature_correspondence(fa, fb)
        g = geometry_correspondence(da, db, 1e-2)
        got = correlation(g, s, 0.3)
        want = 0.0
        for iy in range(p):
            for ix in range(p):
                for jy in range(p):
                    for jx in range(p):
                        va = fa[iy, ix] / np.linalg.norm(fa[iy, ix])
                        vb = fb[jy, jx] / np.linalg.norm(fb[jy, jx])
                        sim = va @ vb
                        corr = 1.0 / (abs(da[iy, ix] - db[jy, jx]) + 1e-2)
                        want -= (corr - 0.3) * sim
        assert abs(got - want) < 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            correlation(np.ones((2, 2)), np.ones((3, 3)), 0.0)


class TestSelectPairs:
    def batch_from_descriptors(self, descs_v, descs_l, views=None):
        k = len(descs_v)
        if views is None:
            views = [i % 2 for i in range(k)]
        feat_v = np.array(descs_v, dtype=np.float64)[:, None, None, :]
        feat_l = np.array(descs_l, dtype=np.float64)[:, None, None, :]
        return PatchBatch(
            view_ids=np.array(views),
            rects=np.zeros((k, 4), dtype=np.int64),
            feat_v=feat_v,
            feat_l=feat_l,
            rgb=np.zeros((k, 1, 1, 3)),
            depth=np.ones((k, 1, 1)),
            app=np.ones((k, 1, 1, 2)),
        )

    def test_hand_example(self):
        # Patch 0 nearly parallel to patch 1, opposite to patch 2.
        descs = [[1.0, 0.0], [0.9, 0.1], [-1.0, 0.0]]
        batch = self.batch_from_descriptors(descs, descs)
        pairs = select_pairs(batch)
        assert pairs.positive[0] == 1 and pairs.negative[0] == 2
        assert pairs.positive[1] == 0 and pairs.negative[1] == 2
        assert pairs.negative[2] in (0, 1)
        assert pairs.positive[0] != 0  # self excluded

    def test_tie_breaks_to_lowest_index(self):
        descs = [[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
        batch = self.batch_from_descriptors(descs, descs)
        pairs = select_pairs(batch)
        assert pairs.positive[0] == 1  # patches 1 and 2 tie; lowest wins
        assert pairs.positive[3] == 0

    def test_positive_scale_invariance(self):
        rng = np.random.default_rng(7)
        k = 5
        dv = rng.normal(size=(k, 3))
        dl = rng.normal(size=(k, 4))
        a = select_pairs(self.batch_from_descriptors(dv, dl))
        b = select_pairs(self.batch_from_descriptors(3.7 * dv, 0.2 * dl))
        np.testing.assert_array_equal(a.positive, b.positive)
        np.testing.assert_array_equal(a.negative, b.negative)

    def test_single_view_batch_rejected(self):
        with pytest.raises(ValueError):
            self.batch_from_descriptors([[1, 0], [0, 1]], [[1, 0], [0, 1]], views=[3, 3])


def brute_force_contrastive(batch, pairs, weights, modality):
    """Independent reimplementation with explicit loops."""
    k = batch.n_patches
    feats = batch.feat_v if modality == "visual" else batch.feat_l

    def norm_rows(x):
        x = x.reshape(-1, x.shape[-1])
        out = np.zeros_like(x)
        for i, row in enumerate(x):
            n = np.linalg.norm(row)
            if n >= 1e-12:
                out[i] = row / n
        return out

    l_app = l_geo = 0.0
    for a in range(k):
        for partner, bias in ((pairs.positive[a], weights.b_pos), (pairs.negative[a], weights.b_neg)):
            fa = norm_rows(feats[a])
            fb = norm_rows(feats[partner])
            aa = norm_rows(batch.app[a])
            ab = norm_rows(batch.app[partner])
            da = batch.depth[a].reshape(-1)
            db = batch.depth[partner].reshape(-1)
            for i in range(fa.shape[0]):
                for j in range(fb.shape[0]):
                    s = fa[i] @ fb[j]
                    f = aa[i] @ ab[j]
                    g = 1.0 / (abs(da[i] - db[j]) + weights.eps_geo)
                    l_app -= (f - bias) * s / k
                    l_geo -= (g - bias) * s / k
    return weights.lambda_app * l_app + weights.lambda_geo * l_geo


class TestContrastiveValues:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(8)
        batch = make_batch(rng, k=3, p=2)
        pairs = select_pairs(batch)
        w = LossWeights()
        for modality in ("visual", "language"):
            got = contrastive_loss(batch, pairs, w, modality)
            want = brute_force_contrastive(batch, pairs, w, modality)
            assert abs(got - want) < 1e-10

    def test_joint_combines_modalities(self):
        rng = np.random.default_rng(9)
        batch = make_batch(rng, k=4, p=2)
        pairs = select_pairs(batch)
        w = LossWeights(lambda_v=0.7, lambda_l=2.0)
        want = 0.7 * contrastive_loss(batch, pairs, w, "visual") + 2.0 * contrastive_loss(
            batch, pairs, w, "language"
        )
        assert abs(joint_cl_loss(batch, pairs, w) - want) < 1e-12

    def test_bad_modality(self):
        rng = np.random.default_rng(10)
        batch = make_batch(rng, k=3, p=2)
        with pytest.raises(ValueError):
            contrastive_loss(batch, select_pairs(batch), LossWeights(), "audio")


class TestContrastiveGrads:
    def test_feature_grads_match_fd(self):
        rng = np.random.default_rng(11)
        batch = make_batch(rng, k=3, p=2, d_v=3, d_l=3)
        pairs = select_pairs(batch)
        w = LossWeights(lambda_v=1.3, lambda_l=0.8)
        res = joint_cl_grads(batch, pairs, w)
        h = 1e-6
        for name, grad in (("feat_v", res.d_feat_v), ("feat_l", res.d_feat_l)):
            arr = getattr(batch, name)
            for _ in range(12):
                idx = tuple(rng.integers(0, s) for s in arr.shape)
                orig = arr[idx]
                arr[idx] = orig + h
                hi = joint_cl_loss(batch, pairs, w)
                arr[idx] = orig - h
                lo = joint_cl_loss(batch, pairs, w)
                arr[idx] = orig
                fd = (hi - lo) / (2 * h)
                assert abs(fd - grad[idx]) < 1e-6, (name, idx, fd, grad[idx])

    def test_depth_grads_match_fd(self):
        rng = np.random.default_rng(12)
        batch = make_batch(rng, k=3, p=2)
        pairs = select_pairs(batch)
        w = LossWeights(eps_geo=0.05)
        res = joint_cl_grads(batch, pairs, w, need_depth=True)
        h = 1e-6
        for _ in range(10):
            idx = tuple(rng.integers(0, s) for s in batch.depth.shape)
            orig = batch.depth[idx]
            batch.depth[idx] = orig + h
            hi = joint_cl_loss(batch, pairs, w)
            batch.depth[idx] = orig - h
            lo = joint_cl_loss(batch, pairs, w)
            batch.depth[idx] = orig
            fd = (hi - lo) / (2 * h)
            assert abs(fd - res.d_depth[idx]) < 5e-6, (idx, fd, res.d_depth[idx])

    def test_depth_grads_off_by_default(self):
        rng = np.random.default_rng(13)
        batch = make_batch(rng, k=3, p=2)
        res = joint_cl_grads(batch, select_pairs(batch), LossWeights())
        assert res.d_depth is None

    def test_value_matches_loss(self):
        rng = np.random.default_rng(14)
        batch = make_batch(rng, k=5, p=2)
        pairs = select_pairs(batch)
        w = LossWeights()
        assert abs(joint_cl_grads(batch, pairs, w).value - joint_cl_loss(batch, pairs, w)) < 1e-12


@given(scale=st.floats(0.1, 10.0), seed=st.integers(0, 100))
@settings(max_examples=20, deadline=None)
def test_correspondence_scale_invariance(scale, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 2, 3))
    b = rng.normal(size=(2, 2, 3))
    np.testing.assert_allclose(
        feature_correspondence(a * scale, b), feature_correspondence(a, b), atol=1e-10
    )
