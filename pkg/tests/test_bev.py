import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtmtrack import tensor as T
from mtmtrack.bev import (
    MAX_POINTS_PER_VOXEL,
    FormatError,
    RegionSpec,
    crop_region,
    encode_bev,
    init_bev_weights,
    read_velodyne,
    template_mask,
    voxelize,
    write_velodyne,
)
from mtmtrack.geometry import OrientedBox3D, track_to_world
from mtmtrack.gradcheck import grad_check


@pytest.fixture
def spec():
    return RegionSpec()


@pytest.fixture
def small():
    return RegionSpec(x_range=(-0.8, 0.8), y_range=(-0.8, 0.8), z_range=(-0.4, 0.4), voxel_size=(0.2, 0.2, 0.4))


class TestRegionSpec:
    def test_desk_grid(self, spec):
        assert spec.voxel_grid == (64, 64, 20)
        assert spec.bev_shape == (64, 64)

    def test_full_resolution_grid(self):
        assert RegionSpec.full_resolution().bev_shape == (256, 256)

    def test_indivisible_range(self):
        with pytest.raises(ValueError):
            RegionSpec(voxel_size=(0.3, 0.1, 0.2))

    def test_index_metric_round_trip(self, spec):
        xy = np.array([[0.0, 0.0], [-3.15, 3.15], [1.23, -2.2]])
        np.testing.assert_allclose(spec.to_metric(spec.to_index(xy)), xy, atol=1e-12)
        np.testing.assert_allclose(spec.to_index(spec.cell_centers()[5, 7]), [5, 7], atol=1e-9)


class TestCrop:
    def test_center_kept_far_dropped(self, spec):
        ref = OrientedBox3D((5, 5, 0), (2, 1, 1), 0.3)
        out = crop_region(np.array([[5.0, 5.0, 0.0], [15.0, 5.0, 0.0]]), ref, spec)
        assert out.shape == (1, 3)
        np.testing.assert_allclose(out[0], 0.0, atol=1e-12)

    def test_empty_is_legal(self, spec):
        assert crop_region(np.zeros((0, 4)), OrientedBox3D((0, 0, 0), (1, 1, 1)), spec).shape == (0, 4)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-math.pi, math.pi), st.floats(-50, 50), st.floats(-50, 50))
    def test_rigid_motion_of_scene_and_ref(self, yaw, tx, ty):
        rng = np.random.default_rng(0)
        spec = RegionSpec()
        ref = OrientedBox3D((1, -1, 0), (2, 1, 1), 0.4)
        pts = rng.uniform(-4, 4, size=(300, 3)) + [1, -1, 0]
        motion = OrientedBox3D((tx, ty, 0.5), (1, 1, 1), yaw)
        moved_ref = track_to_world(ref, motion)
        a = crop_region(pts, ref, spec)
        b = crop_region(track_to_world(pts, motion), moved_ref, spec)
        # points lying on a range boundary may flip; compare the robustly interior ones
        inner = lambda p: p[np.all(np.abs(p[:, :2]) < 3.19, axis=1) & (p[:, 2] > -2.99) & (p[:, 2] < 0.99)]  # noqa: E731
        np.testing.assert_allclose(inner(a), inner(b), atol=1e-5)


class TestVoxelize:
    def test_empty(self, spec):
        g = voxelize(np.zeros((0, 3)), spec)
        assert g.shape == (64, 64, 20, 5) and not g.any()

    def test_point_at_voxel_center(self, spec):
        g = voxelize(np.array([[0.05, 0.05, 0.1]]), spec)
        np.testing.assert_allclose(g[32, 32, 15], [1, 1, 0, 0, 0], atol=1e-6)
        assert g.sum() == pytest.approx(2.0)

    def test_count_clipped(self, spec):
        g = voxelize(np.tile([[0.01, 0.01, 0.01]], (50, 1)), spec)
        assert g[..., 1].max() == MAX_POINTS_PER_VOXEL

    def test_mean_offset(self, spec):
        g = voxelize(np.array([[0.02, 0.05, 0.1], [0.06, 0.05, 0.1]]), spec)
        np.testing.assert_allclose(g[32, 32, 15, 2:], [-0.1, 0, 0], atol=1e-6)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        spec = RegionSpec()
        pts = rng.uniform([-3.2, -3.2, -3], [3.2, 3.2, 1], size=(400, 3))
        pts = np.vstack([pts, pts[:50] + 1e-3])
        assert voxelize(pts, spec).tobytes() == voxelize(pts[rng.permutation(len(pts))], spec).tobytes()


class TestEncoder:
    def test_zero_in_zero_out(self, spec):
        w = init_bev_weights(spec, 8, np.random.default_rng(0))
        out = encode_bev(voxelize(np.zeros((0, 3)), spec), w, spec)
        assert out.shape == (64, 64, 8)
        assert not out.data.any()

    def test_shape_with_stride(self):
        s = RegionSpec(bev_stride=2)
        w = init_bev_weights(s, 4, np.random.default_rng(0))
        assert encode_bev(voxelize(np.zeros((0, 3)), s), w, s).shape == (32, 32, 4)

    def test_shared_weights_give_equal_branches(self, spec):
        w = init_bev_weights(spec, 8, np.random.default_rng(0))
        vox = voxelize(np.random.default_rng(1).uniform(-2, 1, size=(500, 3)), spec)
        assert encode_bev(vox, w, spec).data.tobytes() == encode_bev(vox, w, spec).data.tobytes()

    def test_gradient_through_both_convs(self, small):
        rng = np.random.default_rng(2)
        w = init_bev_weights(small, 3, rng)
        for k in ("bev.conv1.b", "bev.conv2.b"):
            w[k].data[:] = rng.uniform(0.1, 0.3, size=w[k].shape)
        vox = T.parameter(rng.normal(size=(*small.bev_shape, 10)))
        proj = T.Tensor(rng.normal(size=(*small.bev_shape, 3)))
        r = grad_check(lambda v, c1, c2: (encode_bev(v, w, small) * proj).sum(),
                       [vox, w["bev.conv1.w"], w["bev.conv2.w"]], h=1e-2, max_checks=30)
        assert r.passed, r


class TestTemplateMask:
    def test_covering_box(self, spec):
        assert template_mask(OrientedBox3D((0, 0, 0), (10, 10, 1)), spec).all()

    def test_unit_square(self, spec):
        m = template_mask(OrientedBox3D((0, 0, 0), (1.0, 1.0, 1.0)), spec)[..., 0]
        assert m.sum() == 100
        rows, cols = np.nonzero(m)
        assert (rows.min(), rows.max(), cols.min(), cols.max()) == (27, 36, 27, 36)

    def test_diamond_symmetry(self, spec):
        m = template_mask(OrientedBox3D((0, 0, 0), (2, 2, 1), math.pi / 4), spec)[..., 0]
        np.testing.assert_array_equal(m, np.rot90(m))

    def test_binary(self, spec):
        m = template_mask(OrientedBox3D((0.3, -0.2, 0), (1.7, 0.8, 1), 0.6), spec)
        assert set(np.unique(m)) <= {0.0, 1.0} and m.shape == (64, 64, 1)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.3, 4.0), st.floats(0.3, 4.0), st.floats(-math.pi, math.pi))
    def test_count_matches_area(self, l, w, yaw):
        spec = RegionSpec()
        m = template_mask(OrientedBox3D((0, 0, 0), (l, w, 1), yaw), spec)
        perimeter_cells = 2 * (l + w) / 0.1
        assert abs(m.sum() - l * w / 0.01) <= perimeter_cells + 4


class TestVelodyne:
    def test_round_trip(self, tmp_path):
        pts = np.random.default_rng(0).normal(size=(17, 4)).astype(np.float32)
        write_velodyne(tmp_path / "a.bin", pts)
        assert read_velodyne(tmp_path / "a.bin").tobytes() == pts.tobytes()

    def test_bad_length(self, tmp_path):
        (tmp_path / "b.bin").write_bytes(b"\0" * 20)
        with pytest.raises(FormatError, match="multiple of 16"):
            read_velodyne(tmp_path / "b.bin")
