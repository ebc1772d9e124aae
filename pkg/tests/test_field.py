import numpy as np
import pytest

from mmfields.field import (
    CapacityError,
    FieldConfig,
    VoxelFieldSet,
    create_field,
    interp_matrix,
    interp_weights,
    inv_sigmoid,
    inv_softplus,
    sample_point,
    sigmoid,
    softplus,
)


def small_config(**kw):
    defaults = dict(
        resolution=(4, 5, 6),
        bbox_min=(-1.0, -1.0, -1.0),
        bbox_max=(1.0, 1.0, 1.0),
        d_v=7,
        d_l=3,
    )
    defaults.update(kw)
    return FieldConfig(**defaults)


def random_field(config, rng, dtype=np.float64):
    f = create_field(config, dtype=dtype)
    f.density_raw = rng.normal(size=f.density_raw.shape).astype(dtype)
    f.color_raw = rng.normal(size=f.color_raw.shape).astype(dtype)
    f.feat_v = rng.normal(size=f.feat_v.shape).astype(dtype)
    f.feat_l = rng.normal(size=f.feat_l.shape).astype(dtype)
    return f


class TestActivations:
    def test_softplus_reference_value(self):
        # softplus(-2) = ln(1 + e^-2)
        assert abs(softplus(-2.0) - 0.1269280110429726) < 1e-12

    def test_softplus_stable_at_extremes(self):
        assert softplus(-800.0) == 0.0
        assert abs(softplus(800.0) - 800.0) < 1e-9
        assert np.isfinite(sigmoid(np.array([-800.0, 800.0]))).all()

    def test_inverses(self):
        for y in [1e-6, 0.1269280110429726, 3.7]:
            assert abs(softplus(inv_softplus(y)) - y) < 1e-12
        for p in [0.01, 0.5, 0.99]:
            assert abs(sigmoid(inv_sigmoid(p)) - p) < 1e-12


class TestFieldConfig:
    def test_defaults(self):
        cfg = small_config()
        assert cfg.d_v == 7 and cfg.d_l == 3
        assert FieldConfig(
            resolution=(2, 2, 2), bbox_min=(0, 0, 0), bbox_max=(1, 1, 1)
        ).d_v == 64

    def test_validation(self):
        with pytest.raises(ValueError):
            small_config(resolution=(1, 4, 4))
        with pytest.raises(ValueError):
            small_config(bbox_min=(1, 0, 0), bbox_max=(1, 1, 1))
        with pytest.raises(ValueError):
            small_config(d_v=0)

    def test_capacity_guard(self):
        cfg = FieldConfig(
            resolution=(1024, 1024, 1024), bbox_min=(0, 0, 0), bbox_max=(1, 1, 1)
        )
        with pytest.raises(CapacityError):
            create_field(cfg)


class TestCreateField:
    def test_init_values_and_shapes(self):
        cfg = small_config(density_init=-2.0, color_init=0.25)
        f = create_field(cfg)
        assert f.density_raw.shape == (4, 5, 6)
        assert f.color_raw.shape == (4, 5, 6, 3)
        assert f.feat_v.shape == (4, 5, 6, 7)
        assert f.feat_l.shape == (4, 5, 6, 3)
        assert np.all(f.density_raw == np.float32(-2.0))
        assert np.all(f.color_raw == np.float32(0.25))
        assert np.all(f.feat_v == 0) and np.all(f.feat_l == 0)

    def test_fresh_field_density_matches_softplus_of_init(self):
        f = create_field(small_config(density_init=-2.0))
        s = sample_point(f, (0.1, -0.2, 0.3))
        assert abs(s.sigma - 0.1269280110429726) < 1e-6  # float32 grid

    def test_shape_mismatch_rejected(self):
        cfg = small_config()
        f = create_field(cfg)
        with pytest.raises(ValueError):
            VoxelFieldSet(
                config=cfg,
                density_raw=f.density_raw[:-1],
                color_raw=f.color_raw,
                feat_v=f.feat_v,
                feat_l=f.feat_l,
            )


class TestSamplePoint:
    def test_exact_voxel_center(self):
        cfg = small_config()
        rng = np.random.default_rng(0)
        f = random_field(cfg, rng)
        # Grid point (2, 3, 4) sits at bbox_min + (2, 3, 4) * voxel_size.
        x = np.array(cfg.bbox_min) + np.array([2, 3, 4]) * cfg.voxel_size
        s = sample_point(f, x)
        assert abs(s.sigma - softplus(f.density_raw[2, 3, 4])) < 1e-12
        np.testing.assert_allclose(s.color, sigmoid(f.color_raw[2, 3, 4]), atol=1e-12)
        np.testing.assert_allclose(s.f_v, f.feat_v[2, 3, 4], atol=1e-12)
        np.testing.assert_allclose(s.f_l, f.feat_l[2, 3, 4], atol=1e-12)

    def test_matches_brute_force_trilinear(self):
        cfg = small_config()
        rng = np.random.default_rng(1)
        f = random_field(cfg, rng)
        h = cfg.voxel_size
        for _ in range(50):
            x = rng.uniform(cfg.bbox_min, cfg.bbox_max)
            u = (x - np.array(cfg.bbox_min)) / h
            i0 = np.minimum(np.floor(u).astype(int), np.array(cfg.resolution) - 2)
            fr = u - i0
            want = np.zeros(cfg.d_v)
            for dx in (0, 1):
                for dy in (0, 1):
                    for dz in (0, 1):
                        w = (
                            (fr[0] if dx else 1 - fr[0])
                            * (fr[1] if dy else 1 - fr[1])
                            * (fr[2] if dz else 1 - fr[2])
                        )
                        want += w * f.feat_v[i0[0] + dx, i0[1] + dy, i0[2] + dz]
            s = sample_point(f, x)
            np.testing.assert_allclose(s.f_v, want, atol=1e-10)

    def test_footprint_weights_sum_to_one(self):
        cfg = small_config()
        f = random_field(cfg, np.random.default_rng(2))
        rng = np.random.default_rng(3)
        for _ in range(30):
            x = rng.uniform(cfg.bbox_min, cfg.bbox_max)
            s = sample_point(f, x)
            assert abs(s.footprint_weights.sum() - 1.0) < 1e-12
            assert s.footprint_indices.shape == (8, 3)

    def test_boundary_point_is_in_bounds(self):
        cfg = small_config()
        f = random_field(cfg, np.random.default_rng(4))
        s = sample_point(f, cfg.bbox_max)
        assert abs(s.footprint_weights.sum() - 1.0) < 1e-12
        assert abs(s.sigma - softplus(f.density_raw[-1, -1, -1])) < 1e-9

    def test_out_of_bounds_returns_zeros(self):
        cfg = small_config()
        f = random_field(cfg, np.random.default_rng(5))
        s = sample_point(f, (2.0, 0.0, 0.0))
        assert s.sigma == 0.0
        assert np.all(s.color == 0.0)
        assert np.all(s.f_v == 0.0) and np.all(s.f_l == 0.0)
        assert s.footprint_indices.shape == (0, 3)

    def test_non_finite_rejected(self):
        f = create_field(small_config())
        with pytest.raises(ValueError):
            sample_point(f, (np.nan, 0, 0))
        with pytest.raises(ValueError):
            sample_point(f, (np.inf, 0, 0))

    def test_continuity_across_voxel_boundary(self):
        cfg = small_config()
        f = random_field(cfg, np.random.default_rng(6))
        x_face = np.array(cfg.bbox_min) + np.array([2, 2.5, 3.1]) * cfg.voxel_size
        eps = 1e-9
        lo = sample_point(f, x_face - np.array([eps, 0, 0]))
        hi = sample_point(f, x_face + np.array([eps, 0, 0]))
        assert abs(lo.sigma - hi.sigma) < 1e-6
        np.testing.assert_allclose(lo.f_v, hi.f_v, atol=1e-6)


class TestInterpMachinery:
    def test_matrix_matches_sample_point(self):
        cfg = small_config()
        f = random_field(cfg, np.random.default_rng(7))
        rng = np.random.default_rng(8)
        pts = rng.uniform(cfg.bbox_min, cfg.bbox_max, size=(40, 3))
        mat, inb = interp_matrix(cfg, pts)
        assert inb.all()
        got = mat @ f.feat_v.reshape(-1, cfg.d_v)
        for i, p in enumerate(pts):
            np.testing.assert_allclose(got[i], sample_point(f, p).f_v, atol=1e-12)

    def test_out_of_bounds_rows_are_empty(self):
        cfg = small_config()
        pts = np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
        _, weights, inb = interp_weights(cfg, pts)
        assert inb.tolist() == [True, False]
        assert weights[1].sum() == 0.0

    def test_adjoint_scatter_matches_dense_accumulation(self):
        cfg = small_config()
        rng = np.random.default_rng(9)
        pts = rng.uniform(cfg.bbox_min, cfg.bbox_max, size=(25, 3))
        mat, _ = interp_matrix(cfg, pts)
        g = rng.normal(size=(25, cfg.d_v))
        scattered = mat.T @ g
        flat, weights, _ = interp_weights(cfg, pts)
        want = np.zeros((cfg.n_voxels, cfg.d_v))
        for n in range(25):
            for c in range(8):
                want[flat[n, c]] += weights[n, c] * g[n]
        np.testing.assert_allclose(np.asarray(scattered), want, atol=1e-10)


class TestFieldSetOps:
    def test_copy_is_deep(self):
        f = create_field(small_config())
        g = f.copy()
        g.density_raw[0, 0, 0] = 9.0
        assert f.density_raw[0, 0, 0] != 9.0

    def test_astype_round_trip_dtype(self):
        f = create_field(small_config(), dtype=np.float32)
        g = f.astype(np.float64)
        assert g.density_raw.dtype == np.float64
        assert g.config is f.config
