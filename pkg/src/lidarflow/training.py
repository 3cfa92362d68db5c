"""End-to-end optimization: the 12-term loss, schedule, augmentation, loop.

Supervision lives at twelve sites: five lidar-grid scales (sparse-aware
pooled pyramid of GT_Lidar), two upsampling scales and five refinement
iterations (mean-pooled pyramid of GT_Dense). Flow values keep full-image
pixel units at every scale, so all terms share one unit. Sites whose pooled
mask is empty contribute nothing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .autodiff import Tensor4, backward
from .errors import (DegenerateSampleError, LidarFlowError, NonFiniteError,
                     ShapeError)
from .flow_io import FlowField
from .lidar_ingest import RangeImage, SparseLidarFlow
from .network import (ForwardOutputs, NetworkParams, full_forward,
                      save_checkpoint)
from .optim import AdamState, adam_step

SITE_NAMES = ("lidar_32", "lidar_16", "lidar_8", "lidar_4", "lidar_2",
              "up_4", "up_2",
              "refine_1", "refine_2", "refine_3", "refine_4", "refine_5")


@dataclass
class TrainConfig:
    total_iters: int = 400_000
    batch_size: int = 10
    lr0: float = 1e-3
    lr_hold: int = 150_000
    lr_half_every: int = 60_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    flip_prob: float = 0.5
    loss_weights: tuple[float, ...] = (1.0,) * 12
    seed: int = 0
    grad_clip: float | None = None
    checkpoint_every: int = 0   # 0: final checkpoint only

    def __post_init__(self):
        if min(self.total_iters, self.batch_size) < 0 or self.batch_size == 0:
            raise ValueError("iterations must be >= 0 and batch size positive")
        if min(self.lr0, self.lr_hold, self.lr_half_every, self.eps) <= 0:
            raise ValueError("schedule constants must be positive")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        if len(self.loss_weights) != 12:
            raise ValueError("exactly 12 loss weights are required")


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Held at lr0, then halved at lr_hold and every lr_half_every after."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    if iteration < cfg.lr_hold:
        return cfg.lr0
    halvings = 1 + (iteration - cfg.lr_hold) // cfg.lr_half_every
    return cfg.lr0 / (2.0 ** halvings)


@dataclass
class SiteTarget:
    """One supervision site: pooled flow plus its validity."""

    flow: np.ndarray   # (1, 2, h, w)
    valid: np.ndarray  # (h, w) bool

    @property
    def empty(self) -> bool:
        return not self.valid.any()


@dataclass
class TrainSample:
    x_t: RangeImage
    x_t1: RangeImage
    gt_dense: FlowField
    gt_lidar: SparseLidarFlow
    lidar_targets: list[SiteTarget] = field(default_factory=list)  # coarse -> fine
    dense_targets: list[SiteTarget] = field(default_factory=list)  # coarse -> fine
    eval_masks: object = None  # optional EvalMasks for scoring

    def site_targets(self) -> list[SiteTarget]:
        if len(self.dense_targets) < 2:
            raise ShapeError("sample lacks the two dense pyramid levels")
        finest_dense = self.dense_targets[-1]
        return (list(self.lidar_targets)
                + list(self.dense_targets)
                + [finest_dense] * 5)


def _flow_to_site(flow_hw2: np.ndarray, valid: np.ndarray) -> SiteTarget:
    return SiteTarget(flow_hw2.transpose(2, 0, 1)[None].copy(), valid.copy())


def _pool_site(site: SiteTarget) -> SiteTarget:
    pooled, mask = ops.avg_pool2x(Tensor4(site.flow), site.valid)
    return SiteTarget(pooled.data, mask)


def build_pyramids(sample: TrainSample, lidar_levels: int = 5,
                   dense_levels: int = 2) -> TrainSample:
    """Attach the pooled supervision pyramids, coarse first."""
    lidar = [_flow_to_site(sample.gt_lidar.flow, sample.gt_lidar.valid)]
    for _ in range(lidar_levels):
        lidar.append(_pool_site(lidar[-1]))
    sample.lidar_targets = lidar[1:][::-1]  # /2 .. /2^levels, coarse first

    dense = [_flow_to_site(sample.gt_dense.flow, sample.gt_dense.valid_mask())]
    for _ in range(dense_levels):
        dense.append(_pool_site(dense[-1]))
    sample.dense_targets = dense[1:][::-1]
    return sample


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def _flip_range_image(ri: RangeImage) -> RangeImage:
    return RangeImage(np.ascontiguousarray(ri.grid[:, ::-1]),
                      np.ascontiguousarray(ri.valid[:, ::-1]))


def _flip_flow_hw2(flow: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(flow[:, ::-1])
    out[:, :, 0] = -out[:, :, 0]
    return out


def _flip_site(site: SiteTarget) -> SiteTarget:
    flow = np.ascontiguousarray(site.flow[:, :, :, ::-1])
    flow[:, 0] = -flow[:, 0]
    return SiteTarget(flow, np.ascontiguousarray(site.valid[:, ::-1]))


def flip_sample(sample: TrainSample) -> TrainSample:
    """Mirror every grid column-wise and negate the u channel of every flow."""
    dense = FlowField(_flip_flow_hw2(sample.gt_dense.flow),
                      None if sample.gt_dense.valid is None
                      else np.ascontiguousarray(sample.gt_dense.valid[:, ::-1]))
    lidar = SparseLidarFlow(_flip_flow_hw2(sample.gt_lidar.flow),
                            np.ascontiguousarray(sample.gt_lidar.valid[:, ::-1]))
    return TrainSample(
        x_t=_flip_range_image(sample.x_t),
        x_t1=_flip_range_image(sample.x_t1),
        gt_dense=dense,
        gt_lidar=lidar,
        lidar_targets=[_flip_site(s) for s in sample.lidar_targets],
        dense_targets=[_flip_site(s) for s in sample.dense_targets],
        eval_masks=sample.eval_masks,
    )


def augment_flip(sample: TrainSample, rng: np.random.Generator,
                 flip_prob: float = 0.5) -> TrainSample:
    if rng.random() < flip_prob:
        return flip_sample(sample)
    return sample


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def site_losses(outputs: ForwardOutputs, sample: TrainSample
                ) -> list[tuple[str, Tensor4 | None]]:
    """Per-site masked EPE; None where the pooled mask is empty."""
    preds = outputs.sites()
    targets = sample.site_targets()
    if len(preds) != len(targets):
        raise ShapeError(f"{len(preds)} prediction sites vs {len(targets)} targets")
    out = []
    for (name, pred), tgt in zip(preds, targets):
        if tgt.empty:
            out.append((name, None))
            continue
        if pred.dims != tgt.flow.shape:
            raise ShapeError(f"site {name}: pred {pred.dims} vs target {tgt.flow.shape}")
        out.append((name, ops.masked_epe_loss(pred, tgt.flow, tgt.valid)))
    return out


def total_loss(outputs: ForwardOutputs, sample: TrainSample,
               weights: tuple[float, ...]) -> Tensor4:
    terms = site_losses(outputs, sample)
    if len(weights) != len(terms):
        raise ShapeError(f"{len(weights)} weights for {len(terms)} sites")
    total: Tensor4 | None = None
    for (name, term), lam in zip(terms, weights):
        if term is None:
            continue
        scaled = ops.scale(term, lam)
        total = scaled if total is None else ops.add(total, scaled)
    if total is None:
        raise DegenerateSampleError("no supervision at any loss site")
    return total


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

@dataclass
class TraceRow:
    iteration: int
    lr: float
    site_values: dict[str, float]   # nan where skipped
    total: float


def write_trace_csv(path, rows: list[TraceRow]) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["iter", "lr", *SITE_NAMES, "total"])
        for r in rows:
            wr.writerow([r.iteration, f"{r.lr:.10g}",
                         *(f"{r.site_values.get(n, float('nan')):.10g}"
                           for n in SITE_NAMES),
                         f"{r.total:.10g}"])


def train_loop(dataset: list[TrainSample], cfg: TrainConfig, params: NetworkParams,
               out_dir=None, adam: dict[str, AdamState] | None = None,
               stop_check=None) -> tuple[list[TraceRow], dict[str, AdamState]]:
    """Deterministic optimization of all three blocks.

    Batches come from a seeded per-epoch shuffle without replacement; each
    sample is flip-augmented, forwarded, and the batch-mean 12-term loss is
    backpropagated into a single Adam step at lr_at(iteration). Emits the
    loss trace (and trace.csv + checkpoints when out_dir is given). A
    non-finite value aborts with the iteration index. ``stop_check``, if
    given, is polled with (iteration, rows) and may end the run early.
    """
    if not dataset:
        raise ValueError("train_loop needs a non-empty dataset")
    rng = np.random.default_rng(cfg.seed)
    if adam is None:
        adam = {}
    names = list(params.tensors)
    rows: list[TraceRow] = []
    order: list[int] = []

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    for it in range(cfg.total_iters):
        batch: list[TrainSample] = []
        for _ in range(cfg.batch_size):
            if not order:
                order = list(rng.permutation(len(dataset)))
            batch.append(dataset[order.pop(0)])

        lr = lr_at(it, cfg)
        site_sums: dict[str, list[float]] = {n: [] for n in SITE_NAMES}
        total: Tensor4 | None = None
        try:
            for sample in batch:
                sample = augment_flip(sample, rng, cfg.flip_prob)
                outputs = full_forward(params, sample.x_t, sample.x_t1)
                sample_total = total_loss(outputs, sample, cfg.loss_weights)
                for name, term in site_losses(outputs, sample):
                    if term is not None:
                        site_sums[name].append(term.item())
                total = sample_total if total is None else ops.add(total, sample_total)
            total = ops.scale(total, 1.0 / cfg.batch_size)
            total_val = total.item()
            if not np.isfinite(total_val):
                raise NonFiniteError("total loss is not finite")
            backward(total)
        except NonFiniteError as e:
            bad = [n for n, vals in site_sums.items()
                   if vals and not np.isfinite(vals[-1])]
            raise NonFiniteError(
                f"iteration {it}: {e}"
                + (f" (offending term {bad[0]})" if bad else "")) from e
        except LidarFlowError as e:
            raise type(e)(f"iteration {it}: {e}") from e

        if cfg.grad_clip is not None:
            sq = sum(float((t.grad ** 2).sum()) for t in params.tensors.values()
                     if t.grad is not None)
            norm = np.sqrt(sq)
            if norm > cfg.grad_clip:
                for t in params.tensors.values():
                    if t.grad is not None:
                        t.grad *= cfg.grad_clip / norm

        for name in names:
            p = params.tensors[name]
            if p.grad is None:
                continue
            if name not in adam:
                adam[name] = AdamState.zeros_like(p)
            adam_step(p, p.grad, adam[name], lr, cfg.beta1, cfg.beta2, cfg.eps)
        params.zero_grad()

        site_vals = {n: (float(np.mean(v)) if v else float("nan"))
                     for n, v in site_sums.items()}
        rows.append(TraceRow(it, lr, site_vals, total_val))

        if out_path is not None and cfg.checkpoint_every and \
                (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out_path / f"checkpoint_{it + 1:07d}.lfw", params, adam)
        if stop_check is not None and stop_check(it, rows):
            break

    if out_path is not None:
        save_checkpoint(out_path / "checkpoint.lfw", params, adam)
        write_trace_csv(out_path / "trace.csv", rows)
    return rows, adam


def desk_train_config(**overrides) -> TrainConfig:
    """Scaled-down settings for the synthetic overfit experiment."""
    base = dict(total_iters=2000, batch_size=2, lr_hold=150_000,
                lr_half_every=60_000, flip_prob=0.5, seed=7)
    base.update(overrides)
    return TrainConfig(**base)
