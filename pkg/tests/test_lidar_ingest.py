"""Point-cloud ingestion, range-image projection, and GT_Lidar construction."""

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarflow.errors import FormatError, GeometryError, ShapeError
from lidarflow.flow_io import FlowField
from lidarflow.lidar_ingest import (CameraModel, GridSpec, PointCloud,
                                    crop_fov, load_point_cloud, pinhole_project,
                                    project_flow_to_lidar, project_points,
                                    project_to_range_image, read_range_image,
                                    save_point_cloud, write_range_image)

DESK = GridSpec(rows=32, cols=64, image_h=64, image_w=128)


def random_cloud(rng, n, spec=DESK):
    """Points drawn uniformly inside the FOV, ranges in [2, 60]."""
    az = rng.uniform(spec.az_min + 1e-6, spec.az_max - 1e-6, n)
    el = rng.uniform(spec.el_min + 1e-6, spec.el_max - 1e-6, n)
    r = rng.uniform(2.0, 60.0, n)
    x = r * np.cos(el) * np.cos(az)
    y = r * np.cos(el) * np.sin(az)
    z = r * np.sin(el)
    refl = rng.uniform(0, 1, n)
    return PointCloud(np.stack([x, y, z, refl], axis=1))


class TestScanFile:
    def test_known_quadruples(self, tmp_path):
        p = tmp_path / "scan.bin"
        p.write_bytes(struct.pack("<8f", 1.0, 2.0, 3.0, 0.5, -4.0, 5.0, -6.0, 0.25))
        cloud = load_point_cloud(p)
        assert len(cloud) == 2
        np.testing.assert_allclose(cloud.points[0], [1, 2, 3, 0.5])
        np.testing.assert_allclose(cloud.points[1], [-4, 5, -6, 0.25])

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.bin"
        p.write_bytes(b"")
        assert len(load_point_cloud(p)) == 0

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        cloud = random_cloud(rng, 50)
        # float32 storage: quantize first so the round trip is exact
        cloud = PointCloud(cloud.points.astype(np.float32).astype(np.float64))
        p = tmp_path / "rt.bin"
        save_point_cloud(p, cloud)
        back = load_point_cloud(p)
        assert np.array_equal(back.points, cloud.points)

    def test_truncated_reports_offset(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"\x00" * 37)
        with pytest.raises(FormatError, match="32"):
            load_point_cloud(p)


class TestCropFov:
    def test_straight_ahead_kept(self):
        cloud = PointCloud(np.array([[10.0, 0.0, 0.0, 0.5]]))
        assert len(crop_fov(cloud, DESK)) == 1

    def test_behind_dropped(self):
        cloud = PointCloud(np.array([[-10.0, 0.0, 0.0, 0.5]]))
        assert len(crop_fov(cloud, DESK)) == 0

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_matches_bruteforce_predicate(self, seed):
        rng = np.random.default_rng(seed)
        pts = np.column_stack([rng.uniform(-30, 30, 60), rng.uniform(-30, 30, 60),
                               rng.uniform(-20, 20, 60), rng.uniform(0, 1, 60)])
        cloud = PointCloud(pts)
        kept = crop_fov(cloud, DESK).points
        expect = []
        for x, y, z, r in pts:
            az = math.atan2(y, x)
            el = math.atan2(z, math.hypot(x, y))
            if DESK.az_min <= az <= DESK.az_max and DESK.el_min <= el <= DESK.el_max:
                expect.append([x, y, z, r])
        np.testing.assert_array_equal(kept, np.array(expect).reshape(-1, 4))


class TestRangeImageProjection:
    def test_center_point_lands_center_band(self):
        az = (DESK.az_min + DESK.az_max) / 2
        el = (DESK.el_min + DESK.el_max) / 2
        r = 10.0
        pt = [r * math.cos(el) * math.cos(az), r * math.cos(el) * math.sin(az),
              r * math.sin(el), 0.3]
        ri = project_to_range_image(PointCloud([pt]), DESK)
        rows, cols = np.nonzero(ri.valid)
        assert rows[0] in (DESK.rows // 2 - 1, DESK.rows // 2)
        assert cols[0] in (DESK.cols // 2 - 1, DESK.cols // 2)

    def test_nearest_wins(self):
        direction = np.array([math.cos(0.001), math.sin(0.001), 0.0])
        pts = [list(5.0 * direction) + [0.2], list(9.0 * direction) + [0.9]]
        ri = project_to_range_image(PointCloud(pts), DESK)
        cell = ri.grid[ri.valid]
        assert cell.shape == (1, 2)
        assert cell[0, 0] == pytest.approx(5.0)
        assert cell[0, 1] == pytest.approx(0.2)

    def test_three_four_five_range(self):
        ri = project_to_range_image(PointCloud([[4.0, 3.0, 0.0, 0.1]]), DESK)
        assert ri.grid[ri.valid][0, 0] == pytest.approx(5.0)

    def test_empty_cloud_all_invalid(self):
        ri = project_to_range_image(PointCloud(np.zeros((0, 4))), DESK)
        assert not ri.valid.any()
        assert (ri.grid == 0).all()

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=15, deadline=None)
    def test_nearest_wins_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        cloud = random_cloud(rng, 300)
        ri = project_to_range_image(cloud, DESK)
        # Brute force: bin every point, track the minimum range per cell.
        best = {}
        for x, y, z, _ in cloud.points:
            az = math.atan2(y, x)
            el = math.atan2(z, math.hypot(x, y))
            row = min(DESK.rows - 1, max(0, int(math.floor(
                DESK.rows * (DESK.el_max - el) / (DESK.el_max - DESK.el_min)))))
            col = min(DESK.cols - 1, max(0, int(math.floor(
                DESK.cols * (az - DESK.az_min) / (DESK.az_max - DESK.az_min)))))
            r = math.sqrt(x * x + y * y + z * z)
            best[(row, col)] = min(best.get((row, col), math.inf), r)
        assert set(zip(*np.nonzero(ri.valid))) == set(best)
        for (row, col), r in best.items():
            assert ri.grid[row, col, 0] == pytest.approx(r)
        assert (ri.grid[ri.valid][:, 0] > 0).all()

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=15, deadline=None)
    def test_mirror_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        cloud = random_cloud(rng, 200)
        mirrored = cloud.points.copy()
        mirrored[:, 1] = -mirrored[:, 1]
        a = project_to_range_image(cloud, DESK)
        b = project_to_range_image(PointCloud(mirrored), DESK)
        np.testing.assert_array_equal(b.valid, a.valid[:, ::-1])
        np.testing.assert_array_equal(b.grid, a.grid[:, ::-1])


class TestPinhole:
    def test_optical_axis(self):
        cam = CameraModel(fx=500, fy=500, cx=100, cy=100)
        u, v, d = pinhole_project([0.0, 0.0, 5.0], cam)
        assert (u, v, d) == (100.0, 100.0, 5.0)

    def test_offset_closed_form(self):
        cam = CameraModel(fx=500, fy=400, cx=100, cy=80)
        u, v, d = pinhole_project([1.0, 0.0, 5.0], cam)
        assert u == pytest.approx(200.0)
        assert v == pytest.approx(80.0)
        assert d == 5.0

    def test_unproject_round_trip(self):
        rng = np.random.default_rng(1)
        cam = CameraModel.aligned_to(DESK)
        pts = random_cloud(rng, 40).points[:, :3]
        u, v, d = project_points(pts, cam)
        assert (d > 0).all()
        # Independent inverse: pixel + depth back to the lidar frame.
        x_cam = (u - cam.cx) * d / cam.fx
        y_cam = (v - cam.cy) * d / cam.fy
        p_cam = np.stack([x_cam, y_cam, d], axis=1)
        back = (p_cam - cam.translation) @ cam.rotation
        np.testing.assert_allclose(back, pts, atol=1e-9)

    def test_bad_rotation_rejected(self):
        with pytest.raises(GeometryError):
            CameraModel(fx=1, fy=1, cx=0, cy=0, rotation=np.eye(3) * 2)

    def test_behind_camera_flagged_by_depth(self):
        cam = CameraModel(fx=10, fy=10, cx=5, cy=5)
        _, _, d = pinhole_project([0.0, 0.0, -3.0], cam)
        assert d == -3.0


class TestProjectFlowToLidar:
    def test_direct_sampling(self):
        cam = CameraModel.aligned_to(DESK)
        cloud = PointCloud([[10.0, 0.2, -0.5, 0.5]])
        u, v, _ = pinhole_project(cloud.points[0, :3], cam)
        px, py = int(math.floor(u + 0.5)), int(math.floor(v + 0.5))
        dense = np.zeros((DESK.image_h, DESK.image_w, 2))
        dense[py, px] = (2.0, -1.0)
        sf = project_flow_to_lidar(cloud, FlowField(dense), cam, DESK)
        assert sf.valid.sum() == 1
        np.testing.assert_allclose(sf.flow[sf.valid][0], [2.0, -1.0])

    def test_behind_camera_invalid(self):
        # Rotate the camera to look backwards: every forward point gets z <= 0.
        rot = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, -1.0], [-1.0, 0.0, 0.0]])
        cam = CameraModel(fx=50, fy=50, cx=64, cy=32, rotation=rot)
        cloud = PointCloud([[10.0, 0.0, 0.0, 0.5]])
        dense = FlowField(np.zeros((DESK.image_h, DESK.image_w, 2)))
        sf = project_flow_to_lidar(cloud, dense, cam, DESK)
        assert not sf.valid.any()

    def test_affine_field_oracle(self):
        # Dense flow is a known affine function of the pixel; every valid cell
        # must reproduce it at its own projected pixel.
        rng = np.random.default_rng(2)
        cam = CameraModel.aligned_to(DESK)
        cloud = random_cloud(rng, 400)
        ys, xs = np.mgrid[0:DESK.image_h, 0:DESK.image_w]
        dense = np.zeros((DESK.image_h, DESK.image_w, 2))
        dense[:, :, 0] = 1.5 + 0.01 * xs - 0.02 * ys
        dense[:, :, 1] = -0.5 + 0.003 * xs + 0.004 * ys
        sf = project_flow_to_lidar(cloud, FlowField(dense), cam, DESK)
        assert sf.valid.sum() > 50
        ri_img = project_to_range_image(cloud, DESK)
        assert not (sf.valid & ~ri_img.valid).any()  # validity subset
        u, v, _ = project_points(cloud.points[:, :3], cam)
        # Rebuild expected values per cell by brute force over the points.
        for row, col in zip(*np.nonzero(sf.valid)):
            got = sf.flow[row, col]
            # the winning point of this cell is the nearest binned one
            best = None
            for k in range(len(cloud)):
                az = math.atan2(cloud.points[k, 1], cloud.points[k, 0])
                el = math.atan2(cloud.points[k, 2],
                                math.hypot(cloud.points[k, 0], cloud.points[k, 1]))
                r = min(DESK.rows - 1, int(math.floor(
                    DESK.rows * (DESK.el_max - el) / (DESK.el_max - DESK.el_min))))
                c = min(DESK.cols - 1, int(math.floor(
                    DESK.cols * (az - DESK.az_min) / (DESK.az_max - DESK.az_min))))
                if (r, c) == (row, col):
                    rng_k = np.linalg.norm(cloud.points[k, :3])
                    if best is None or rng_k < best[1]:
                        best = (k, rng_k)
            k = best[0]
            px = int(math.floor(u[k] + 0.5))
            py = int(math.floor(v[k] + 0.5))
            want = dense[py, px]
            np.testing.assert_allclose(got, want)

    def test_dim_mismatch_raises(self):
        cam = CameraModel.aligned_to(DESK)
        with pytest.raises(ShapeError):
            project_flow_to_lidar(PointCloud(np.zeros((0, 4))),
                                  FlowField(np.zeros((10, 10, 2))), cam, DESK)


class TestLri1:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        cloud = random_cloud(rng, 500)
        ri = project_to_range_image(cloud, DESK)
        # quantize to f32 so the file round trip is exact
        grid = ri.grid.astype(np.float32).astype(np.float64)
        grid[~ri.valid] = 0.0
        from lidarflow.lidar_ingest import RangeImage
        ri = RangeImage(grid, ri.valid)
        p = tmp_path / "ri.lri"
        write_range_image(p, ri)
        back = read_range_image(p)
        assert np.array_equal(back.grid, ri.grid)
        assert np.array_equal(back.valid, ri.valid)

    def test_magic_and_layout(self, tmp_path):
        from lidarflow.lidar_ingest import RangeImage
        grid = np.zeros((32, 32, 2))
        grid[0, 0] = (2.0, 0.5)
        valid = np.zeros((32, 32), bool)
        valid[0, 0] = True
        p = tmp_path / "ri.lri"
        write_range_image(p, RangeImage(grid, valid))
        raw = p.read_bytes()
        assert raw[:4] == b"LRI1"
        assert struct.unpack_from("<II", raw, 4) == (32, 32)
        assert len(raw) == 12 + 9 * 32 * 32

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.lri"
        p.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FormatError):
            read_range_image(p)


def test_grid_spec_validation():
    with pytest.raises(GeometryError):
        GridSpec(rows=33, cols=64, image_h=64, image_w=128)
    with pytest.raises(GeometryError):
        GridSpec(rows=32, cols=64, image_h=65, image_w=128)
    with pytest.raises(GeometryError):
        GridSpec(rows=32, cols=64, image_h=64, image_w=128, az_min=1.0, az_max=-1.0)
