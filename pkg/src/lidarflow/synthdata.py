"""Deterministic desk-scale scenes with exact flow ground truth.

A scene is a background translation plus up to five rectangular regions
carrying affine flows, all defined in image pixels. The first range image is
a smooth sinusoid texture (per-object range offsets make the rectangles
visible to the sensor); the second is rendered by inverse-warping the first
with the flow read at each cell's projected pixel. GT_Lidar comes from the
real projection pipeline applied to a synthetic cloud that reproduces the
texture exactly, so every ingest invariant holds by construction.

Occlusion (the noc mask) follows a forward-mapping conflict rule: a source
pixel is occluded when its rounded destination also receives a pixel moving
with a different flow, or falls outside the image.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GeometryError, ShapeError
from .evaluation import EvalMasks
from .flow_io import FlowField
from .lidar_ingest import (CameraModel, GridSpec, PointCloud, RangeImage,
                           cell_pixels, project_flow_to_lidar, project_points,
                           project_to_range_image)
from .training import TrainSample, build_pyramids


@dataclass(frozen=True)
class ObjectSpec:
    rect: tuple[int, int, int, int]      # y0, y1, x0, x1 (exclusive ends)
    translation: tuple[float, float]     # px
    affine: tuple[float, float, float, float]  # row-major 2x2 about the center
    range_offset: float                  # m, added inside the rectangle


@dataclass(frozen=True)
class SceneConfig:
    spec: GridSpec
    n_objects: int = 2
    bg_translation_max: float = 3.0
    object_translation_max: float = 4.0
    object_affine_max: float = 0.02
    texture_octaves: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.n_objects <= 5:
            raise GeometryError("n_objects must lie in [0, 5]")
        worst = (self.bg_translation_max + self.object_translation_max
                 + self.object_affine_max * max(self.spec.image_h, self.spec.image_w))
        if worst >= 512:
            raise GeometryError("flow bounds exceed the KITTI-encodable range")


def _texture(rows: int, cols: int, octaves: int, rng: np.random.Generator,
             lo: float, hi: float) -> np.ndarray:
    r = np.linspace(0.0, 1.0, rows)[:, None]
    c = np.linspace(0.0, 1.0, cols)[None, :]
    out = np.zeros((rows, cols))
    for o in range(max(1, octaves)):
        fr = rng.uniform(0.5, 2.0 + 1.5 * o)
        fc = rng.uniform(0.5, 2.0 + 1.5 * o)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(2 * np.pi * (fr * r + fc * c) + phase) / (o + 1)
    span = out.max() - out.min()
    if span < 1e-12:
        return np.full((rows, cols), (lo + hi) / 2)
    return lo + (hi - lo) * (out - out.min()) / span


def _cell_directions(spec: GridSpec) -> np.ndarray:
    """(rows, cols, 3) unit rays through the grid-cell centers."""
    el = spec.el_max - (np.arange(spec.rows) + 0.5) * (spec.el_max - spec.el_min) / spec.rows
    az = spec.az_min + (np.arange(spec.cols) + 0.5) * (spec.az_max - spec.az_min) / spec.cols
    el = el[:, None]
    az = az[None, :]
    return np.stack([np.cos(el) * np.cos(az),
                     np.cos(el) * np.sin(az),
                     np.broadcast_to(np.sin(el), (spec.rows, spec.cols))], axis=-1)


def _dense_flow(spec: GridSpec, bg_flow: tuple[float, float],
                objects: list[ObjectSpec]) -> tuple[np.ndarray, np.ndarray]:
    """Analytic (H, W, 2) flow and the object-id map (-1 for background)."""
    h, w = spec.image_h, spec.image_w
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    flow = np.empty((h, w, 2))
    flow[:, :, 0] = bg_flow[0]
    flow[:, :, 1] = bg_flow[1]
    obj_id = np.full((h, w), -1, dtype=np.int64)
    for k, obj in enumerate(objects):
        y0, y1, x0, x1 = obj.rect
        cy, cx = (y0 + y1) / 2.0, (x0 + x1) / 2.0
        a, b, c, d = obj.affine
        sel = (slice(y0, y1), slice(x0, x1))
        dx = xs[sel] - cx
        dy = ys[sel] - cy
        flow[sel + (0,)] = obj.translation[0] + a * dx + b * dy
        flow[sel + (1,)] = obj.translation[1] + c * dx + d * dy
        obj_id[sel] = k
    return flow, obj_id


def _flow_at(px: np.ndarray, py: np.ndarray, bg_flow: tuple[float, float],
             objects: list[ObjectSpec]) -> tuple[np.ndarray, np.ndarray]:
    """Analytic flow at float pixel coordinates; the background extends
    beyond the image, objects apply on [x0, x1) x [y0, y1)."""
    u = np.full(px.shape, bg_flow[0], dtype=np.float64)
    v = np.full(px.shape, bg_flow[1], dtype=np.float64)
    for obj in objects:
        y0, y1, x0, x1 = obj.rect
        inside = (px >= x0) & (px < x1) & (py >= y0) & (py < y1)
        if not inside.any():
            continue
        cy, cx = (y0 + y1) / 2.0, (x0 + x1) / 2.0
        a, b, c, d = obj.affine
        dx = px[inside] - cx
        dy = py[inside] - cy
        u[inside] = obj.translation[0] + a * dx + b * dy
        v[inside] = obj.translation[1] + c * dx + d * dy
    return u, v


def _noc_mask(flow: np.ndarray) -> np.ndarray:
    """Forward-map every pixel; conflicts at a target, or leaving the frame,
    mark the sources occluded."""
    h, w = flow.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    tx = np.floor(xs + flow[:, :, 0] + 0.5).astype(np.int64)
    ty = np.floor(ys + flow[:, :, 1] + 0.5).astype(np.int64)
    inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    noc = inside.copy()

    tgt = (ty * w + tx).ravel()
    fu = flow[:, :, 0].ravel()
    fv = flow[:, :, 1].ravel()
    ins = inside.ravel()
    order = np.argsort(tgt[ins], kind="stable")
    idx = np.nonzero(ins)[0][order]
    tgt_sorted = tgt[idx]
    starts = np.r_[0, 1 + np.nonzero(np.diff(tgt_sorted))[0], idx.size]
    occluded = np.zeros(h * w, dtype=bool)
    for a, b in zip(starts[:-1], starts[1:]):
        group = idx[a:b]
        if group.size < 2:
            continue
        if np.ptp(fu[group]) > 1e-9 or np.ptp(fv[group]) > 1e-9:
            occluded[group] = True
    noc &= ~occluded.reshape(h, w)
    return noc


def warp_range_image(x_t: RangeImage, flow: np.ndarray) -> RangeImage:
    """Inverse bilinear warp: output cell (r, c) samples (r - v, c - u).

    Cells whose sample point leaves the grid, or whose nonzero-weight
    neighbors include an invalid cell, become invalid.
    """
    rows, cols = x_t.shape
    if flow.shape != (rows, cols, 2):
        raise ShapeError(f"flow {flow.shape} != grid {(rows, cols, 2)}")
    rr, cc = np.mgrid[0:rows, 0:cols]
    src_r = rr - flow[:, :, 1]
    src_c = cc - flow[:, :, 0]
    r0 = np.floor(src_r)
    c0 = np.floor(src_c)
    fr = src_r - r0
    fc = src_c - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)

    grid = np.zeros((rows, cols, 2))
    ok = np.ones((rows, cols), dtype=bool)
    for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                        (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        ri = r0 + dr
        ci = c0 + dc
        used = wgt > 0
        inb = (ri >= 0) & (ri < rows) & (ci >= 0) & (ci < cols)
        ric = np.clip(ri, 0, rows - 1)
        cic = np.clip(ci, 0, cols - 1)
        ok &= ~used | (inb & x_t.valid[ric, cic])
        grid += wgt[:, :, None] * x_t.grid[ric, cic] * (used & inb)[:, :, None]
    grid[~ok] = 0.0
    return RangeImage(grid, ok)


def build_scene(spec: GridSpec, cam: CameraModel, bg_flow: tuple[float, float],
                objects: list[ObjectSpec], texture_rng: np.random.Generator,
                texture_octaves: int = 3) -> TrainSample:
    """Assemble one fully supervised sample from explicit scene parameters."""
    base_range = _texture(spec.rows, spec.cols, texture_octaves, texture_rng, 15.0, 55.0)
    base_refl = _texture(spec.rows, spec.cols, texture_octaves, texture_rng, 0.15, 0.85)

    dense_flow, obj_id = _dense_flow(spec, bg_flow, objects)
    fg = obj_id >= 0
    noc = _noc_mask(dense_flow)
    gt_dense = FlowField(dense_flow.copy())
    masks = EvalMasks(valid=np.ones((spec.image_h, spec.image_w), bool),
                      noc=noc, fg=fg)

    # Cloud consistent with the textures: one return per cell center.
    dirs = _cell_directions(spec)
    pix, in_image = cell_pixels(
        PointCloud(np.concatenate([dirs.reshape(-1, 3) * 10.0,
                                   np.zeros((spec.rows * spec.cols, 1))], axis=1)),
        cam, spec)
    cell_obj = np.full((spec.rows, spec.cols), -1, dtype=np.int64)
    sel = in_image
    cell_obj[sel] = obj_id[pix[sel, 1], pix[sel, 0]]
    ranges = base_range.copy()
    for k, obj in enumerate(objects):
        ranges[cell_obj == k] += obj.range_offset
    if ranges.min() < 2.0 or ranges.max() > 80.0:
        raise GeometryError("range texture escapes [2, 80] m")
    pts = dirs * ranges[:, :, None]
    cloud = PointCloud(np.concatenate(
        [pts.reshape(-1, 3), base_refl.reshape(-1, 1)], axis=1))

    x_t = project_to_range_image(cloud, spec)
    gt_lidar = project_flow_to_lidar(cloud, gt_dense, cam, spec)

    # Grid flow for rendering frame t+1: the analytic flow evaluated at each
    # cell's float pixel, in cell units (u -> columns, v -> rows). Cells whose
    # ray misses the image still carry the background motion.
    u_f, v_f, _ = project_points(pts.reshape(-1, 3), cam)
    gu, gv = _flow_at(u_f, v_f, bg_flow, objects)
    grid_flow = np.stack([gu, gv], axis=-1).reshape(spec.rows, spec.cols, 2)
    x_t1 = warp_range_image(x_t, grid_flow)

    sample = TrainSample(x_t=x_t, x_t1=x_t1, gt_dense=gt_dense,
                         gt_lidar=gt_lidar, eval_masks=masks)
    return build_pyramids(sample)


def generate_sample(cfg: SceneConfig, cam: CameraModel | None = None) -> TrainSample:
    """Seed-deterministic sample; identical SceneConfig -> identical bits."""
    spec = cfg.spec
    if cam is None:
        cam = CameraModel.aligned_to(spec)
    rng = np.random.default_rng(cfg.seed)
    bg = tuple(rng.uniform(-cfg.bg_translation_max, cfg.bg_translation_max, 2))
    objects = []
    for k in range(cfg.n_objects):
        hgt = int(rng.integers(spec.image_h // 6, spec.image_h // 2))
        wid = int(rng.integers(spec.image_w // 6, spec.image_w // 2))
        y0 = int(rng.integers(0, spec.image_h - hgt))
        x0 = int(rng.integers(0, spec.image_w - wid))
        tr = tuple(rng.uniform(-cfg.object_translation_max,
                               cfg.object_translation_max, 2))
        aff = tuple(rng.uniform(-cfg.object_affine_max, cfg.object_affine_max, 4))
        off = float(rng.uniform(-8.0, -2.0))
        objects.append(ObjectSpec((y0, y0 + hgt, x0, x0 + wid), tr, aff, off))
    return build_scene(spec, cam, bg, objects, rng, cfg.texture_octaves)


# ---------------------------------------------------------------------------
# Dataset manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    split: str
    seed: int
    sample_id: str


def make_manifest(n_train: int, n_val: int, n_test: int, base_seed: int = 1000
                  ) -> list[ManifestEntry]:
    """Disjoint seed ranges per split stand in for non-overlapping sequences."""
    entries = []
    seed = base_seed
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        for i in range(n):
            entries.append(ManifestEntry(split, seed, f"{split}_{i:04d}"))
            seed += 1
    return entries


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w") as f:
        for e in entries:
            f.write(f"{e.split} {e.seed} {e.sample_id}\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        split, seed, sample_id = line.split()
        entries.append(ManifestEntry(split, int(seed), sample_id))
    return entries


def samples_from_manifest(entries: list[ManifestEntry], spec: GridSpec,
                          split: str, scene_kwargs: dict | None = None
                          ) -> list[TrainSample]:
    kw = scene_kwargs or {}
    out = []
    for e in entries:
        if e.split != split:
            continue
        out.append(generate_sample(SceneConfig(spec=spec, seed=e.seed, **kw)))
    return out
