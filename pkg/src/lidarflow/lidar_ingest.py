"""From raw lidar point clouds to range images and sparse lidar-flow labels.

Scans are binned over a uniform azimuth/elevation grid: row 0 holds the
highest elevation band, column 0 the smallest azimuth (the rightmost ray,
azimuth increasing leftward). On bin collisions the nearest return wins.

File formats:

* KITTI scan: consecutive little-endian float32 quadruples
  (x forward, y left, z up, reflectance), no header.
* "LRI1" range image: magic b'LRI1', u32 rows, u32 cols, rows*cols float32
  ranges row-major, rows*cols float32 reflectivities, rows*cols validity
  bytes (0/1).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor4
from .errors import FormatError, GeometryError, ShapeError
from .flow_io import FlowField

LRI_MAGIC = b"LRI1"

# Default fields of view: HDL-64-like vertical spread, +/-45 deg horizontal.
DEFAULT_AZ_HALF = math.radians(45.0)
DEFAULT_EL_MIN = math.radians(-24.8)
DEFAULT_EL_MAX = math.radians(2.0)


@dataclass(frozen=True)
class GridSpec:
    """Dimensions of the lidar grid, the image domain, and the sensor FOV."""

    rows: int = 64
    cols: int = 384
    image_h: int = 256
    image_w: int = 1224
    az_min: float = -DEFAULT_AZ_HALF
    az_max: float = DEFAULT_AZ_HALF
    el_min: float = DEFAULT_EL_MIN
    el_max: float = DEFAULT_EL_MAX

    def __post_init__(self):
        if min(self.rows, self.cols, self.image_h, self.image_w) <= 0:
            raise GeometryError("grid and image dimensions must be positive")
        if self.rows % 32 or self.cols % 32:
            raise GeometryError(
                f"lidar grid {self.rows}x{self.cols} must be divisible by 32")
        if self.image_h % 8 or self.image_w % 8:
            raise GeometryError(
                f"image {self.image_h}x{self.image_w} must be divisible by 8")
        if not self.az_min < self.az_max:
            raise GeometryError("azimuth FOV must be ordered")
        if not self.el_min < self.el_max:
            raise GeometryError("elevation FOV must be ordered")


@dataclass
class PointCloud:
    """(P, 4) array of (x, y, z, reflectivity) returns."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(self.points)):
            raise FormatError("point cloud contains non-finite values")
        refl = self.points[:, 3]
        if refl.size and (refl.min() < 0 or refl.max() > 1):
            raise FormatError("reflectivity must lie in [0, 1]")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class RangeImage:
    """(rows, cols, 2) grid of (range m, reflectivity) plus validity."""

    grid: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.grid.ndim != 3 or self.grid.shape[2] != 2:
            raise ShapeError(f"range grid must be (rows, cols, 2), got {self.grid.shape}")
        if self.valid.shape != self.grid.shape[:2]:
            raise ShapeError("validity shape mismatch")
        if np.any(self.grid[self.valid][:, 0] <= 0):
            raise ShapeError("valid cells must carry positive range")
        if np.any(self.grid[~self.valid] != 0):
            raise ShapeError("invalid cells must hold the 0 sentinel")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape[:2]  # type: ignore[return-value]

    def to_tensor(self, dtype=np.float64) -> Tensor4:
        return Tensor4(self.grid.transpose(2, 0, 1)[None].astype(dtype))


@dataclass
class SparseLidarFlow:
    """Image-pixel flow stored on the lidar grid where projection succeeded."""

    flow: np.ndarray   # (rows, cols, 2), full-image pixel units
    valid: np.ndarray  # (rows, cols) bool

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.flow.ndim != 3 or self.flow.shape[2] != 2:
            raise ShapeError(f"lidar flow must be (rows, cols, 2), got {self.flow.shape}")
        if self.valid.shape != self.flow.shape[:2]:
            raise ShapeError("validity shape mismatch")


@dataclass
class CameraModel:
    """Pinhole intrinsics plus the rigid lidar-to-camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise GeometryError("rotation must be orthonormal with determinant +1")

    @classmethod
    def aligned_to(cls, spec: GridSpec) -> "CameraModel":
        """Canonical camera whose image spans the grid's FOV.

        Lidar axes (x fwd, y left, z up) map to camera axes (x right, y down,
        z fwd); focal lengths stretch the FOV across the image.
        """
        rot = np.array([[0.0, -1.0, 0.0],
                        [0.0, 0.0, -1.0],
                        [1.0, 0.0, 0.0]])
        tan_l, tan_r = math.tan(spec.az_max), math.tan(spec.az_min)
        fx = spec.image_w / (tan_l - tan_r)
        cx = fx * tan_l
        tan_u, tan_d = math.tan(spec.el_max), math.tan(spec.el_min)
        fy = spec.image_h / (tan_u - tan_d)
        cy = fy * tan_u
        return cls(fx=fx, fy=fy, cx=cx, cy=cy, rotation=rot)


def pinhole_project(point, cam: CameraModel) -> tuple[float, float, float]:
    """Project one lidar-frame point; depth <= 0 flags points the caller must drop."""
    u, v, d = project_points(np.asarray(point, dtype=np.float64).reshape(1, 3), cam)
    return float(u[0]), float(v[0]), float(d[0])


def project_points(pts: np.ndarray, cam: CameraModel
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized pinhole projection of (P, 3) lidar-frame points."""
    p_cam = pts @ cam.rotation.T + cam.translation
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z != 0, cam.fx * p_cam[:, 0] / z + cam.cx, np.nan)
        v = np.where(z != 0, cam.fy * p_cam[:, 1] / z + cam.cy, np.nan)
    return u, v, z


def load_point_cloud(path) -> PointCloud:
    data = Path(path).read_bytes()
    if len(data) % 16:
        raise FormatError(
            f"{path}: truncated scan, {len(data) % 16} stray bytes at offset "
            f"{len(data) - len(data) % 16}")
    pts = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(pts)


def save_point_cloud(path, cloud: PointCloud) -> None:
    Path(path).write_bytes(cloud.points.astype("<f4").tobytes())


def _angles(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    az = np.arctan2(pts[:, 1], pts[:, 0])
    el = np.arctan2(pts[:, 2], np.hypot(pts[:, 0], pts[:, 1]))
    return az, el


def crop_fov(cloud: PointCloud, spec: GridSpec) -> PointCloud:
    """Keep points whose azimuth and elevation fall inside the FOV, in order."""
    if len(cloud) == 0:
        return PointCloud(cloud.points.copy())
    az, el = _angles(cloud.points)
    keep = ((az >= spec.az_min) & (az <= spec.az_max)
            & (el >= spec.el_min) & (el <= spec.el_max))
    return PointCloud(cloud.points[keep])


def _bin_points(cloud: PointCloud, spec: GridSpec) -> np.ndarray:
    """Grid of winning point indices (-1 where empty); nearest range wins."""
    winner = np.full((spec.rows, spec.cols), -1, dtype=np.int64)
    if len(cloud) == 0:
        return winner
    pts = cloud.points
    rng = np.sqrt(pts[:, 0] ** 2 + pts[:, 1] ** 2 + pts[:, 2] ** 2)
    az, el = _angles(pts)
    inside = ((az >= spec.az_min) & (az <= spec.az_max)
              & (el >= spec.el_min) & (el <= spec.el_max) & (rng > 0))
    idx = np.nonzero(inside)[0]
    if idx.size == 0:
        return winner
    el_span = spec.el_max - spec.el_min
    az_span = spec.az_max - spec.az_min
    rows = np.floor(spec.rows * (spec.el_max - el[idx]) / el_span).astype(np.int64)
    cols = np.floor(spec.cols * (az[idx] - spec.az_min) / az_span).astype(np.int64)
    rows = np.clip(rows, 0, spec.rows - 1)
    cols = np.clip(cols, 0, spec.cols - 1)
    # Write farthest first so the nearest return survives.
    order = np.argsort(-rng[idx], kind="stable")
    winner[rows[order], cols[order]] = idx[order]
    return winner


def project_to_range_image(cloud: PointCloud, spec: GridSpec) -> RangeImage:
    winner = _bin_points(cloud, spec)
    valid = winner >= 0
    grid = np.zeros((spec.rows, spec.cols, 2), dtype=np.float64)
    if valid.any():
        pts = cloud.points[winner[valid]]
        grid[valid, 0] = np.sqrt(pts[:, 0] ** 2 + pts[:, 1] ** 2 + pts[:, 2] ** 2)
        grid[valid, 1] = pts[:, 3]
    return RangeImage(grid, valid)


def project_flow_to_lidar(cloud: PointCloud, dense: FlowField, cam: CameraModel,
                          spec: GridSpec) -> SparseLidarFlow:
    """Sample the dense image flow at each winning point's projected pixel.

    Cells stay invalid when empty, when the point sits behind the camera,
    when the nearest pixel falls outside the image, or when that pixel
    carries no dense ground truth.
    """
    if dense.shape != (spec.image_h, spec.image_w):
        raise ShapeError(
            f"dense flow {dense.shape} != image {(spec.image_h, spec.image_w)}")
    winner = _bin_points(cloud, spec)
    cell_valid = winner >= 0
    flow = np.zeros((spec.rows, spec.cols, 2), dtype=np.float64)
    out_valid = np.zeros((spec.rows, spec.cols), dtype=bool)
    if not cell_valid.any():
        return SparseLidarFlow(flow, out_valid)

    pts = cloud.points[winner[cell_valid]][:, :3]
    u, v, depth = project_points(pts, cam)
    with np.errstate(invalid="ignore"):
        px = np.where(np.isfinite(u), np.floor(u + 0.5), -1).astype(np.int64)
        py = np.where(np.isfinite(v), np.floor(v + 0.5), -1).astype(np.int64)
    ok = ((depth > 0) & (px >= 0) & (px < spec.image_w)
          & (py >= 0) & (py < spec.image_h))
    dense_valid = dense.valid_mask()
    ok &= dense_valid[np.clip(py, 0, spec.image_h - 1),
                      np.clip(px, 0, spec.image_w - 1)]
    cells = np.nonzero(cell_valid)
    rows_ok = cells[0][ok]
    cols_ok = cells[1][ok]
    flow[rows_ok, cols_ok] = dense.flow[py[ok], px[ok]]
    out_valid[rows_ok, cols_ok] = True
    return SparseLidarFlow(flow, out_valid)


def cell_pixels(cloud: PointCloud, cam: CameraModel, spec: GridSpec
                ) -> tuple[np.ndarray, np.ndarray]:
    """Nearest image pixel per grid cell: (rows, cols, 2) int array of (px, py)
    and a boolean in-image mask. Cells without a winning point are masked out."""
    winner = _bin_points(cloud, spec)
    cell_valid = winner >= 0
    pix = np.zeros((spec.rows, spec.cols, 2), dtype=np.int64)
    inside = np.zeros((spec.rows, spec.cols), dtype=bool)
    if not cell_valid.any():
        return pix, inside
    pts = cloud.points[winner[cell_valid]][:, :3]
    u, v, depth = project_points(pts, cam)
    with np.errstate(invalid="ignore"):
        px = np.where(np.isfinite(u), np.floor(u + 0.5), -1).astype(np.int64)
        py = np.where(np.isfinite(v), np.floor(v + 0.5), -1).astype(np.int64)
    ok = ((depth > 0) & (px >= 0) & (px < spec.image_w)
          & (py >= 0) & (py < spec.image_h))
    cells = np.nonzero(cell_valid)
    pix[cells[0], cells[1], 0] = np.where(ok, px, 0)
    pix[cells[0], cells[1], 1] = np.where(ok, py, 0)
    inside[cells[0][ok], cells[1][ok]] = True
    return pix, inside


# ---------------------------------------------------------------------------
# LRI1 range-image file
# ---------------------------------------------------------------------------

def write_range_image(path, ri: RangeImage) -> None:
    rows, cols = ri.shape
    with open(path, "wb") as f:
        f.write(LRI_MAGIC)
        f.write(struct.pack("<II", rows, cols))
        f.write(ri.grid[:, :, 0].astype("<f4").tobytes())
        f.write(ri.grid[:, :, 1].astype("<f4").tobytes())
        f.write(ri.valid.astype(np.uint8).tobytes())


def read_range_image(path) -> RangeImage:
    data = Path(path).read_bytes()
    if data[:4] != LRI_MAGIC:
        raise FormatError(f"{path}: bad LRI1 magic")
    rows, cols = struct.unpack_from("<II", data, 4)
    n = rows * cols
    want = 12 + 9 * n
    if len(data) != want:
        raise FormatError(f"{path}: expected {want} bytes for {rows}x{cols}, got {len(data)}")
    ranges = np.frombuffer(data, "<f4", n, 12).astype(np.float64)
    refl = np.frombuffer(data, "<f4", n, 12 + 4 * n).astype(np.float64)
    valid = np.frombuffer(data, np.uint8, n, 12 + 8 * n).astype(bool)
    grid = np.stack([ranges, refl], axis=-1).reshape(rows, cols, 2)
    grid[~valid.reshape(rows, cols)] = 0.0
    return RangeImage(grid, valid.reshape(rows, cols))
