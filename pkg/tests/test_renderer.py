import numpy as np
import pytest

from mmfields.field import FieldConfig, create_field, inv_sigmoid, inv_softplus, softplus
from mmfields.geometry import CameraModel, SegmentSet, look_at_pose
from mmfields.renderer import (
    RayBundle,
    Upstream,
    backward_rays,
    composite,
    composite_weights,
    forward_rays,
    make_ray_bundle,
    render_view,
)
from mmfields.field import FieldSample


def cube_config(res=8, d_v=5, d_l=4, **kw):
    return FieldConfig(
        resolution=(res, res, res),
        bbox_min=(-1.0, -1.0, -1.0),
        bbox_max=(1.0, 1.0, 1.0),
        d_v=d_v,
        d_l=d_l,
        **kw,
    )


def random_field(config, seed=0):
    rng = np.random.default_rng(seed)
    f = create_field(config, dtype=np.float64)
    f.density_raw = rng.normal(size=f.density_raw.shape)
    f.color_raw = rng.normal(size=f.color_raw.shape)
    f.feat_v = rng.normal(size=f.feat_v.shape)
    f.feat_l = rng.normal(size=f.feat_l.shape)
    return f


def make_sample(sigma, color, d_v=2, d_l=2):
    return FieldSample(
        sigma=sigma,
        color=np.asarray(color, dtype=np.float64),
        f_v=np.zeros(d_v),
        f_l=np.zeros(d_l),
        footprint_indices=np.empty((0, 3), dtype=np.int64),
        footprint_weights=np.empty(0),
    )


class TestComposite:
    def test_two_sample_hand_values(self):
        # sigma = 1, delta = 1 twice: alpha = 1 - 1/e, T2 = 1/e.
        samples = [make_sample(1.0, (1, 0, 0)), make_sample(1.0, (0, 1, 0))]
        segs = SegmentSet(t_mid=np.array([0.5, 1.5]), delta=np.array([1.0, 1.0]))
        out = composite(samples, segs)
        a = 1.0 - np.exp(-1.0)
        np.testing.assert_allclose(
            out.color_hat, [a, np.exp(-1.0) * a, 0.0], atol=1e-12
        )
        np.testing.assert_allclose(out.color_hat, [0.6321206, 0.2325442, 0.0], atol=1e-6)
        assert abs(out.opacity - (1.0 - np.exp(-2.0))) < 1e-12
        # Unnormalized expected depth: sum w_i t_i.
        assert abs(out.depth - (a * 0.5 + np.exp(-1.0) * a * 1.5)) < 1e-12

    def test_empty_input(self):
        out = composite([], SegmentSet(t_mid=np.empty(0), delta=np.empty(0)))
        assert out.opacity == 0.0
        assert np.all(out.color_hat == 0.0)
        assert out.depth == 0.0

    def test_length_mismatch(self):
        samples = [make_sample(1.0, (1, 0, 0))]
        segs = SegmentSet(t_mid=np.array([0.5, 1.5]), delta=np.array([1.0, 1.0]))
        with pytest.raises(ValueError):
            composite(samples, segs)

    def test_weights_plus_residual_transmittance_is_one(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = rng.integers(1, 60)
            sigma = softplus(rng.normal(size=(1, n)) * 3)
            delta = rng.uniform(0.01, 0.5, size=(1, n))
            _, _, weight, trans_final, _ = composite_weights(sigma, delta)
            assert abs(weight.sum() + trans_final[0] - 1.0) < 1e-9

    def test_zero_density_is_transparent(self):
        samples = [make_sample(0.0, (1, 1, 1)) for _ in range(4)]
        segs = SegmentSet(t_mid=np.array([0.5, 1.5, 2.5, 3.5]), delta=np.ones(4))
        out = composite(samples, segs)
        assert out.opacity == 0.0
        assert np.all(out.color_hat == 0.0)


class TestForwardRays:
    def bundle_and_field(self, seed=0, n_rays=12, n_samples=16):
        cfg = cube_config()
        f = random_field(cfg, seed)
        rng = np.random.default_rng(seed + 100)
        origins = rng.uniform(-0.5, 0.5, size=(n_rays, 3)) + np.array([0, 0, 3.0])
        dirs = np.array([0, 0, -1.0]) + 0.2 * rng.normal(size=(n_rays, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        bundle = make_ray_bundle(cfg, origins, dirs, n_samples)
        return cfg, f, bundle

    def test_feature_payload_shares_color_weights_exactly(self):
        # Samples whose first feature dims equal their color must composite to
        # bit-identical outputs: one weight vector serves every payload.
        rng = np.random.default_rng(5)
        samples = []
        for _ in range(9):
            color = rng.uniform(0, 1, size=3)
            s = make_sample(float(rng.uniform(0, 4)), color, d_v=5)
            s = FieldSample(
                sigma=s.sigma,
                color=s.color,
                f_v=np.concatenate([color, rng.normal(size=2)]),
                f_l=s.f_l,
                footprint_indices=s.footprint_indices,
                footprint_weights=s.footprint_weights,
            )
            samples.append(s)
        t = np.cumsum(rng.uniform(0.1, 0.3, size=9))
        segs = SegmentSet(t_mid=t, delta=np.full(9, 0.05))
        out = composite(samples, segs)
        np.testing.assert_array_equal(out.feat_v_hat[:3], out.color_hat)

    def test_constant_color_field_matches_feature_branch(self):
        # With a spatially constant color, activation and interpolation
        # commute, so the full renderer must agree bitwise across branches.
        cfg = cube_config(d_v=3)
        f = random_field(cfg, 3)
        from mmfields.field import inv_sigmoid

        color = np.array([0.8, 0.35, 0.6])
        f.color_raw[:] = inv_sigmoid(color)
        f.feat_v[:] = color
        rng = np.random.default_rng(5)
        origins = np.tile(np.array([0.2, -0.1, 3.0]), (6, 1))
        dirs = np.array([0.05, 0.1, -1.0]) + 0.1 * rng.normal(size=(6, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        bundle = make_ray_bundle(cfg, origins, dirs, 24)
        fwd = forward_rays(f, bundle)
        np.testing.assert_allclose(fwd.feat_v_hat, fwd.color_hat, atol=1e-12)

    def test_quadrature_refinement_converges(self):
        # Doubling, then 16x-ing the sample count moves outputs by less than
        # the coarse-level discretization error bound.
        cfg = cube_config()
        f = random_field(cfg, 7)
        origins = np.array([[0.1, 0.2, 2.5], [-0.4, 0.0, 2.5], [0.3, -0.3, 2.5]])
        dirs = np.array([[0, 0, -1.0], [0.1, 0.05, -1.0], [-0.05, 0.1, -1.0]])
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        coarse = forward_rays(f, make_ray_bundle(cfg, origins, dirs, 1024))
        fine = forward_rays(f, make_ray_bundle(cfg, origins, dirs, 16384))
        assert np.max(np.abs(coarse.color_hat - fine.color_hat)) < 1e-3
        assert np.max(np.abs(coarse.feat_v_hat - fine.feat_v_hat)) < 1e-3
        assert np.max(np.abs(coarse.depth - fine.depth)) < 1e-3

    def test_ray_missing_box_renders_background(self):
        cfg, f, _ = self.bundle_and_field()
        origins = np.array([[5.0, 5.0, 3.0]])
        dirs = np.array([[0.0, 0.0, -1.0]])
        fwd = forward_rays(f, make_ray_bundle(cfg, origins, dirs, 8))
        assert fwd.opacity[0] == 0.0
        assert np.all(fwd.color_hat[0] == 0.0)

    def test_opaque_wall_depth(self):
        cfg = cube_config(res=16)
        f = create_field(cfg, dtype=np.float64)
        f.density_raw[:] = -30.0
        # Opaque slab at z in [-0.2, 0.2]: indices near the middle.
        zs = np.linspace(-1, 1, 16)
        slab = (zs >= -0.2) & (zs <= 0.2)
        f.density_raw[:, :, slab] = inv_softplus(500.0)
        f.color_raw[:] = inv_sigmoid(0.8)
        origins = np.array([[0.0, 0.0, 2.0]])
        dirs = np.array([[0.0, 0.0, -1.0]])
        fwd = forward_rays(f, make_ray_bundle(cfg, origins, dirs, 512))
        assert fwd.opacity[0] > 0.999
        # Wall front face at z = 0.2 -> depth 1.8, reached within the one-voxel
        # trilinear ramp ahead of the face (voxel size 2/15).
        assert 1.8 - 2.0 / 15 < fwd.depth[0] < 1.8 + 0.02
        np.testing.assert_allclose(fwd.color_hat[0], [0.8, 0.8, 0.8], atol=1e-3)


class TestRenderView:
    def camera(self, w=24, h=20):
        pose = look_at_pose([0, -2.5, 0.6], [0, 0, 0])
        return CameraModel(fx=30.0, fy=30.0, cx=w / 2, cy=h / 2, width=w, height=h, pose=pose)

    def test_shapes_and_ranges(self):
        cfg = cube_config()
        f = random_field(cfg, 11)
        cam = self.camera()
        out = render_view(f, cam, n_samples=32)
        assert out.rgb.shape == (20, 24, 3)
        assert out.feat_v.shape == (20, 24, cfg.d_v)
        assert out.depth.shape == (20, 24)
        assert np.all(out.rgb >= 0) and np.all(out.rgb <= 1)
        assert np.all(out.opacity >= 0) and np.all(out.opacity <= 1)
        assert np.all(out.depth >= 0)

    def test_deterministic_per_seed_and_chunk_independent(self):
        cfg = cube_config()
        f = random_field(cfg, 12)
        cam = self.camera()
        a = render_view(f, cam, n_samples=16, jitter=True, seed=5, chunk=64)
        b = render_view(f, cam, n_samples=16, jitter=True, seed=5, chunk=97)
        c = render_view(f, cam, n_samples=16, jitter=True, seed=6)
        np.testing.assert_array_equal(a.rgb, b.rgb)
        assert np.any(a.rgb != c.rgb)

    def test_painted_box_renders_its_color(self):
        cfg = cube_config(res=24)
        f = create_field(cfg, dtype=np.float64)
        f.density_raw[:] = -30.0
        f.color_raw[:] = inv_sigmoid(np.array([0.0, 1.0, 0.0]))
        # Solid axis-aligned box spanning [-0.5, 0.5]^2 x [-0.3, 0.3].
        centers = np.linspace(-1, 1, 24)
        mx = (np.abs(centers) <= 0.5)
        mz = (np.abs(centers) <= 0.3)
        mask = mx[:, None, None] & mx[None, :, None] & mz[None, None, :]
        f.density_raw[mask] = inv_softplus(800.0)
        cam = self.camera(w=32, h=32)
        out = render_view(f, cam, n_samples=256, features=False)
        # Center pixels look straight at the box interior.
        center = out.rgb[14:18, 14:18]
        assert np.all(np.abs(center - np.array([0, 1, 0])) < 5e-3)
        assert np.all(out.opacity[14:18, 14:18] > 0.999)


class TestBackward:
    def scenario(self, seed=0, detach=True):
        cfg = cube_config(res=6, d_v=4, d_l=3)
        f = random_field(cfg, seed)
        rng = np.random.default_rng(seed + 50)
        origins = rng.uniform(-0.4, 0.4, size=(5, 3)) + np.array([0, 0, 2.2])
        dirs = np.array([0, 0, -1.0]) + 0.25 * rng.normal(size=(5, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        bundle = make_ray_bundle(cfg, origins, dirs, 7)
        up = Upstream(
            d_color_hat=rng.normal(size=(5, 3)),
            d_feat_v_hat=rng.normal(size=(5, cfg.d_v)),
            d_feat_l_hat=rng.normal(size=(5, cfg.d_l)),
            d_depth=rng.normal(size=5),
            d_weight=rng.normal(size=(5, 7)),
        )
        return cfg, f, bundle, up

    @staticmethod
    def pseudo_loss(field, bundle, up):
        fwd = forward_rays(field, bundle)
        val = 0.0
        val += np.sum(up.d_color_hat * fwd.color_hat)
        val += np.sum(up.d_feat_v_hat * fwd.feat_v_hat)
        val += np.sum(up.d_feat_l_hat * fwd.feat_l_hat)
        val += np.sum(up.d_depth * fwd.depth)
        val += np.sum(up.d_weight * fwd.weight)
        return val

    def test_full_gradients_match_finite_differences(self):
        cfg, f, bundle, up = self.scenario()
        fwd = forward_rays(f, bundle)
        grads = backward_rays(
            f, bundle, fwd, up, train={"density", "color", "feat_v", "feat_l"},
            detach_feature_density=False,
        )
        rng = np.random.default_rng(99)
        h = 1e-5
        for name in ("density", "color", "feat_v", "feat_l"):
            grid = f.grids()[name]
            for _ in range(25):
                idx = tuple(rng.integers(0, s) for s in grid.shape)
                orig = grid[idx]
                grid[idx] = orig + h
                hi = self.pseudo_loss(f, bundle, up)
                grid[idx] = orig - h
                lo = self.pseudo_loss(f, bundle, up)
                grid[idx] = orig
                fd = (hi - lo) / (2 * h)
                an = grads[name][idx]
                denom = max(abs(an), abs(fd), 1e-6)
                assert abs(an - fd) / denom < 1e-5, (name, idx, an, fd)

    def test_detached_density_ignores_feature_upstreams(self):
        cfg, f, bundle, up = self.scenario(seed=2)
        fwd = forward_rays(f, bundle)
        detached = backward_rays(f, bundle, fwd, up, train={"density"})
        photo_only = Upstream(d_color_hat=up.d_color_hat)
        want = backward_rays(
            f, bundle, fwd, photo_only, train={"density"}, detach_feature_density=False
        )
        np.testing.assert_allclose(detached["density"], want["density"], atol=1e-12)
