"""KITTI Flow 2015-style scoring: EPE and Fl outlier percentages.

A pixel counts as correctly estimated when its end-point error is < 3 px or
< 5% of the ground-truth magnitude; Fl is the percentage of the remaining
outliers over background / foreground / all valid pixels, restricted to
non-occluded pixels ("Noc") or taken over every valid pixel ("Occ").
Empty buckets are reported as undefined, never as 0.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMaskError, ShapeError
from .flow_io import FlowField

BUCKETS = ("bg_noc", "bg_occ", "fg_noc", "fg_occ", "all_noc", "all_occ")


@dataclass
class EvalMasks:
    """Validity, non-occlusion and foreground masks over the image."""

    valid: np.ndarray
    noc: np.ndarray | None = None
    fg: np.ndarray | None = None

    def __post_init__(self):
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.noc is None:
            self.noc = self.valid.copy()
        if self.fg is None:
            self.fg = np.zeros_like(self.valid)
        self.noc = np.asarray(self.noc, dtype=bool) & self.valid
        self.fg = np.asarray(self.fg, dtype=bool) & self.valid
        if self.noc.shape != self.valid.shape or self.fg.shape != self.valid.shape:
            raise ShapeError("mask shapes disagree")


def epe_map(pred: FlowField, gt: FlowField, valid: np.ndarray | None = None
            ) -> tuple[np.ndarray, float]:
    """Per-pixel Euclidean error (zero at invalid pixels) and its valid mean."""
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    if valid is None:
        valid = gt.valid_mask()
    if valid.shape != pred.shape:
        raise ShapeError("validity shape mismatch")
    if not valid.any():
        raise EmptyMaskError("no valid pixels to evaluate")
    diff = pred.flow - gt.flow
    err = np.sqrt(diff[:, :, 0] ** 2 + diff[:, :, 1] ** 2)
    err = np.where(valid, err, 0.0)
    return err, float(err[valid].mean())


def outlier_mask(epe: np.ndarray, gt: FlowField, valid: np.ndarray) -> np.ndarray:
    """Outlier iff valid and epe >= 3 px and epe >= 5% of the GT magnitude."""
    if epe.shape != gt.shape or valid.shape != gt.shape:
        raise ShapeError("shape mismatch in outlier_mask")
    mag = np.sqrt(gt.flow[:, :, 0] ** 2 + gt.flow[:, :, 1] ** 2)
    return valid & (epe >= 3.0) & (epe >= 0.05 * mag)


@dataclass
class EvalReport:
    """EPE mean plus Fl-BG/FG/ALL percentages for Noc and Occ regions."""

    epe_mean: float
    fl: dict[str, float | None]       # keys from BUCKETS; None = undefined
    counts: dict[str, tuple[int, int]]  # bucket -> (outliers, pixels)

    def __post_init__(self):
        for k, v in self.fl.items():
            if v is not None and not 0.0 <= v <= 100.0:
                raise ValueError(f"Fl percentage out of range for {k}: {v}")

    def format_table(self) -> str:
        def fmt(v):
            return "  n/a" if v is None else f"{v:5.2f}"
        out = io.StringIO()
        out.write("        Fl-BG   Fl-FG  Fl-ALL     EPE\n")
        out.write(f"Noc     {fmt(self.fl['bg_noc'])}   {fmt(self.fl['fg_noc'])}"
                  f"   {fmt(self.fl['all_noc'])}   {self.epe_mean:5.2f}\n")
        out.write(f"Occ     {fmt(self.fl['bg_occ'])}   {fmt(self.fl['fg_occ'])}"
                  f"   {fmt(self.fl['all_occ'])}\n")
        return out.getvalue()

    def to_csv(self) -> str:
        head = ",".join(["epe"] + list(BUCKETS))
        vals = [f"{self.epe_mean:.6g}"]
        vals += ["" if self.fl[b] is None else f"{self.fl[b]:.6g}" for b in BUCKETS]
        return head + "\n" + ",".join(vals) + "\n"


@dataclass
class EvalAccumulator:
    """Pixel-exact accumulation across frames, KITTI-style."""

    epe_sum: float = 0.0
    valid_count: int = 0
    bucket_outliers: dict[str, int] = field(
        default_factory=lambda: {b: 0 for b in BUCKETS})
    bucket_pixels: dict[str, int] = field(
        default_factory=lambda: {b: 0 for b in BUCKETS})

    def add(self, pred: FlowField, gt: FlowField, masks: EvalMasks) -> None:
        err, _ = epe_map(pred, gt, masks.valid)
        out = outlier_mask(err, gt, masks.valid)
        self.epe_sum += float(err[masks.valid].sum())
        self.valid_count += int(masks.valid.sum())
        regions = {"bg": masks.valid & ~masks.fg, "fg": masks.fg, "all": masks.valid}
        filters = {"noc": masks.noc, "occ": masks.valid}
        for rname, region in regions.items():
            for fname, filt in filters.items():
                bucket = region & filt
                self.bucket_pixels[f"{rname}_{fname}"] += int(bucket.sum())
                self.bucket_outliers[f"{rname}_{fname}"] += int(out[bucket].sum())

    def report(self) -> EvalReport:
        if self.valid_count == 0:
            raise EmptyMaskError("nothing accumulated")
        fl: dict[str, float | None] = {}
        counts: dict[str, tuple[int, int]] = {}
        for b in BUCKETS:
            n = self.bucket_pixels[b]
            k = self.bucket_outliers[b]
            counts[b] = (k, n)
            fl[b] = None if n == 0 else 100.0 * k / n
        return EvalReport(self.epe_sum / self.valid_count, fl, counts)


def fl_scores(outliers: np.ndarray, masks: EvalMasks,
              epe: np.ndarray | None = None) -> EvalReport:
    """Single-frame report from a precomputed outlier map."""
    acc = EvalAccumulator()
    regions = {"bg": masks.valid & ~masks.fg, "fg": masks.fg, "all": masks.valid}
    filters = {"noc": masks.noc, "occ": masks.valid}
    for rname, region in regions.items():
        for fname, filt in filters.items():
            bucket = region & filt
            acc.bucket_pixels[f"{rname}_{fname}"] = int(bucket.sum())
            acc.bucket_outliers[f"{rname}_{fname}"] = int(outliers[bucket].sum())
    acc.valid_count = int(masks.valid.sum())
    acc.epe_sum = float(epe[masks.valid].sum()) if epe is not None else 0.0
    return acc.report()


def evaluate_pair(pred: FlowField, gt: FlowField, masks: EvalMasks) -> EvalReport:
    acc = EvalAccumulator()
    acc.add(pred, gt, masks)
    return acc.report()
