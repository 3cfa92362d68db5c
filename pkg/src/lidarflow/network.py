"""The three sequentially connected blocks and their geometry scheduler.

Block 1 (lidar flow) is a contractive-expansive net over the stacked scan
pair: five stride-2 convolutions (kernels 7,5,5,3,3; channels base*{1,2,4,8,8})
down to 1/32 of the lidar grid, then four stride-2 transposed convolutions
back up to 1/2, with skip concatenation from the matching contraction level
and the 2x-upsampled previous flow estimate concatenated at every level. A
3x3 head predicts flow at each of the five scales.

Block 2 (domain transform) pools the scan pair to 1/2, stacks it with the
lidar flow (6 channels) and runs three two-branch stages: a narrow branch of
five 3x5 convolutions and a wide branch of one 3x25 convolution, both steered
to the same scheduled height/width by per-side (possibly negative) padding,
then concatenated. Two deconv+predict stages raise the result from
(H/8, W/8) to (H/2, W/2), each prediction concatenated forward.

Block 3 (refinement) iterates five times at (H/2, W/2): two 3x3 convolutions
over concat(features, previous flow), then a fresh 3x3 flow head. Weights are
not shared across iterations. The final output is the bilinear 2x upsampling
of the last refinement estimate.

Feature-map sizes between stages follow linear integer schedules
(width_schedule); the per-layer padding realizing a schedule may crop
(negative padding) when a stage must shrink faster than its kernel allows.

Checkpoint format "LFW1": magic b'LFW1', u32 tensor count, then per tensor
u32 name length, name bytes, u32 x 4 dims, little-endian float32 data
row-major. Optimizer state is stored under '<name>.adam_{m,v,t}'.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .autodiff import Tensor4
from .errors import FormatError, GeometryError, ShapeError
from .flow_io import FlowField
from .lidar_ingest import GridSpec, RangeImage
from .optim import AdamState, he_init

CONTRACT_KERNELS = (7, 5, 5, 3, 3)
CONTRACT_MULTS = (1, 2, 4, 8, 8)
EXPAND_MULTS = {4: 4, 3: 2, 2: 1, 1: 1}
CHECKPOINT_MAGIC = b"LFW1"


@dataclass(frozen=True)
class NetworkConfig:
    spec: GridSpec
    base_channels: int = 64
    contraction_levels: int = 5
    dt_stages: int = 3
    dt_upscale_stages: int = 2
    refine_iters: int = 5
    narrow_kernel: tuple[int, int] = (3, 5)
    narrow_convs_per_stage: int = 5
    wide_kernel_height: int = 3
    wide_kernel_width: int = 25
    refine_convs_per_iter: int = 2
    leaky_slope: float = 0.1

    def __post_init__(self):
        s = self.spec
        if s.rows >> self.contraction_levels < 1 or s.cols >> self.contraction_levels < 1:
            raise GeometryError(
                f"grid {s.rows}x{s.cols} too small for {self.contraction_levels} "
                "contraction levels")
        if self.base_channels < 1:
            raise GeometryError("base_channels must be positive")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def width_schedule(w_in: int, w_out: int, stages: int) -> list[int]:
    """Monotone integer ramp from w_in (exclusive) to w_out (inclusive)."""
    if stages < 1:
        raise GeometryError("width_schedule needs at least one stage")
    vals = [_round_half_up(w_in + (w_out - w_in) * k / stages)
            for k in range(1, stages + 1)]
    vals[-1] = w_out
    return vals


def _split_pad(total: int) -> tuple[int, int]:
    first = total // 2
    return first, total - first


@dataclass(frozen=True)
class LayerSpec:
    """Geometry of one conv or deconv layer, fixed at plan time."""

    name: str
    kind: str                       # "conv" | "deconv"
    in_ch: int
    out_ch: int
    kernel: tuple[int, int]
    stride: tuple[int, int]
    pad: tuple[int, int, int, int]
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]
    activation: bool


@dataclass
class NetworkPlan:
    """Every layer's geometry plus the shapes the forward pass must produce."""

    config: NetworkConfig
    layers: dict[str, LayerSpec] = field(default_factory=dict)
    lidar_pred_hw: list[tuple[int, int]] = field(default_factory=list)
    dt_stage_hw: list[tuple[int, int]] = field(default_factory=list)
    up_pred_hw: list[tuple[int, int]] = field(default_factory=list)
    refine_hw: tuple[int, int] = (0, 0)
    final_hw: tuple[int, int] = (0, 0)

    def add(self, layer: LayerSpec) -> None:
        if layer.name in self.layers:
            raise GeometryError(f"layer {layer.name} planned twice")
        self.layers[layer.name] = layer

    @property
    def prediction_site_count(self) -> int:
        cfg = self.config
        return cfg.contraction_levels + cfg.dt_upscale_stages + cfg.refine_iters

    def parameter_count(self) -> int:
        total = 0
        for sp in self.layers.values():
            kh, kw = sp.kernel
            total += sp.out_ch * sp.in_ch * kh * kw + sp.out_ch
        return total


def _conv_out(n: int, k: int, s: int, pa: int, pb: int, name: str, axis: str) -> int:
    eff = n + pa + pb
    out = (eff - k) // s + 1
    if eff < k or out < 1:
        raise GeometryError(f"{name}: non-positive output {axis} "
                            f"(input {n}, pad ({pa},{pb}), kernel {k})")
    return out


def _plan_conv(plan: NetworkPlan, name: str, in_ch: int, out_ch: int,
               kernel: tuple[int, int], stride: tuple[int, int],
               pad: tuple[int, int, int, int], in_hw: tuple[int, int],
               activation: bool = True) -> tuple[int, int]:
    kh, kw = kernel
    ho = _conv_out(in_hw[0], kh, stride[0], pad[0], pad[1], name, "height")
    wo = _conv_out(in_hw[1], kw, stride[1], pad[2], pad[3], name, "width")
    plan.add(LayerSpec(name, "conv", in_ch, out_ch, kernel, stride, pad,
                       in_hw, (ho, wo), activation))
    return ho, wo


def _plan_deconv(plan: NetworkPlan, name: str, in_ch: int, out_ch: int,
                 in_hw: tuple[int, int], activation: bool = True) -> tuple[int, int]:
    # All planned deconvs are exact 2x: kernel 4, stride 2, pad 1 per side.
    ho = (in_hw[0] - 1) * 2 + 4 - 2
    wo = (in_hw[1] - 1) * 2 + 4 - 2
    plan.add(LayerSpec(name, "deconv", in_ch, out_ch, (4, 4), (2, 2),
                       (1, 1, 1, 1), in_hw, (ho, wo), activation))
    return ho, wo


def _sched_pad(kern: int, n_in: int, n_out: int) -> tuple[int, int]:
    return _split_pad(n_out - n_in + kern - 1)


def plan_network(cfg: NetworkConfig) -> NetworkPlan:
    """Resolve every feature-map size from the config alone (no allocation)."""
    plan = NetworkPlan(cfg)
    spec = cfg.spec
    base = cfg.base_channels

    # Block 1: contraction.
    hw = (spec.rows, spec.cols)
    in_ch = 4
    level_hw: list[tuple[int, int]] = []
    for i in range(1, cfg.contraction_levels + 1):
        k = CONTRACT_KERNELS[i - 1]
        out_ch = base * CONTRACT_MULTS[i - 1]
        p = (k - 1) // 2
        hw = _plan_conv(plan, f"lidar.conv{i}", in_ch, out_ch, (k, k), (2, 2),
                        (p, p, p, p), hw)
        level_hw.append(hw)
        in_ch = out_ch

    # Block 1: expansion with skips and per-scale flow heads.
    plan.lidar_pred_hw = [level_hw[-1]]
    top = cfg.contraction_levels
    carry_ch = base * CONTRACT_MULTS[top - 1]
    _plan_conv(plan, f"lidar.pred{top}", carry_ch, 2, (3, 3), (1, 1),
               (1, 1, 1, 1), level_hw[-1], activation=False)
    for level in range(top - 1, 0, -1):
        dec_ch = base * EXPAND_MULTS[level]
        hw = _plan_deconv(plan, f"lidar.deconv{level}", carry_ch, dec_ch,
                          level_hw[level])
        if hw != level_hw[level - 1]:
            raise GeometryError(
                f"lidar.deconv{level}: {hw} does not meet skip {level_hw[level - 1]}")
        carry_ch = base * CONTRACT_MULTS[level - 1] + dec_ch + 2
        _plan_conv(plan, f"lidar.pred{level}", carry_ch, 2, (3, 3), (1, 1),
                   (1, 1, 1, 1), hw, activation=False)
        plan.lidar_pred_hw.append(hw)

    # Block 2, sub-block A: two-branch stages steered by size schedules.
    h_in, w_in = spec.rows // 2, spec.cols // 2
    if plan.lidar_pred_hw[-1] != (h_in, w_in):
        raise GeometryError("lidar flow resolution does not match pooled input")
    h_targets = width_schedule(h_in, spec.image_h // 8, cfg.dt_stages)
    w_targets = width_schedule(w_in, spec.image_w // 8, cfg.dt_stages)
    plan.dt_stage_hw = list(zip(h_targets, w_targets))
    nkh, nkw = cfg.narrow_kernel
    stage_in_ch = 6
    cur = (h_in, w_in)
    for s in range(1, cfg.dt_stages + 1):
        tgt = plan.dt_stage_hw[s - 1]
        hs = width_schedule(cur[0], tgt[0], cfg.narrow_convs_per_stage)
        ws = width_schedule(cur[1], tgt[1], cfg.narrow_convs_per_stage)
        step = cur
        ch = stage_in_ch
        for j in range(1, cfg.narrow_convs_per_stage + 1):
            want = (hs[j - 1], ws[j - 1])
            pt, pb = _sched_pad(nkh, step[0], want[0])
            pl, pr = _sched_pad(nkw, step[1], want[1])
            got = _plan_conv(plan, f"up.s{s}.narrow{j}", ch, base, (nkh, nkw),
                             (1, 1), (pt, pb, pl, pr), step)
            if got != want:
                raise GeometryError(f"up.s{s}.narrow{j}: got {got}, scheduled {want}")
            step, ch = got, base
        pt, pb = _sched_pad(cfg.wide_kernel_height, cur[0], tgt[0])
        pl, pr = _sched_pad(cfg.wide_kernel_width, cur[1], tgt[1])
        got = _plan_conv(plan, f"up.s{s}.wide", stage_in_ch, base,
                         (cfg.wide_kernel_height, cfg.wide_kernel_width),
                         (1, 1), (pt, pb, pl, pr), cur)
        if got != tgt:
            raise GeometryError(f"up.s{s}.wide: got {got}, scheduled {tgt}")
        cur = tgt
        stage_in_ch = 2 * base

    # Block 2, sub-block B: deconv + predict, prediction concatenated forward.
    feats_ch = stage_in_ch
    for k in range(1, cfg.dt_upscale_stages + 1):
        cur = _plan_deconv(plan, f"up.dec{k}", feats_ch, base, cur)
        _plan_conv(plan, f"up.pred{k}", base, 2, (3, 3), (1, 1), (1, 1, 1, 1),
                   cur, activation=False)
        plan.up_pred_hw.append(cur)
        feats_ch = base + 2
    if cur != (spec.image_h // 2, spec.image_w // 2):
        raise GeometryError(
            f"domain transform ends at {cur}, expected "
            f"{(spec.image_h // 2, spec.image_w // 2)}")

    # Block 3: refinement iterations at (H/2, W/2).
    plan.refine_hw = cur
    for i in range(1, cfg.refine_iters + 1):
        ch = base + 2
        for j in range(1, cfg.refine_convs_per_iter + 1):
            _plan_conv(plan, f"end.it{i}.conv{j}", ch, base, (3, 3), (1, 1),
                       (1, 1, 1, 1), cur)
            ch = base
        _plan_conv(plan, f"end.it{i}.pred", base, 2, (3, 3), (1, 1),
                   (1, 1, 1, 1), cur, activation=False)

    plan.final_hw = (spec.image_h, spec.image_w)
    return plan


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class NetworkParams:
    """Named weights and biases of the three blocks, in plan order."""

    config: NetworkConfig
    plan: NetworkPlan
    tensors: dict[str, Tensor4]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).data.dtype

    def block(self, prefix: str) -> dict[str, Tensor4]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def weight(self, layer: str) -> Tensor4:
        return self.tensors[layer + ".w"]

    def bias(self, layer: str) -> Tensor4:
        return self.tensors[layer + ".b"]


def init_params(cfg: NetworkConfig, rng: np.random.Generator | None = None,
                dtype=np.float32, init: str = "he") -> NetworkParams:
    """Allocate all parameters; 'he' Gaussians for weights, zero biases."""
    plan = plan_network(cfg)
    if rng is None:
        rng = np.random.default_rng(0)
    tensors: dict[str, Tensor4] = {}
    for sp in plan.layers.values():
        kh, kw = sp.kernel
        if sp.kind == "conv":
            shape = (sp.out_ch, sp.in_ch, kh, kw)
        else:
            shape = (sp.in_ch, sp.out_ch, kh, kw)
        if init == "zero":
            w = Tensor4(np.zeros(shape, dtype=dtype), requires_grad=True)
        else:
            w = he_init(shape, rng, fan_in=sp.in_ch * kh * kw, dtype=dtype)
        tensors[sp.name + ".w"] = w
        tensors[sp.name + ".b"] = Tensor4(np.zeros((1, sp.out_ch, 1, 1), dtype=dtype),
                                          requires_grad=True)
    return NetworkParams(cfg, plan, tensors)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

@dataclass
class ForwardOutputs:
    """All twelve prediction sites plus the full-resolution field."""

    lidar_preds: list[Tensor4]    # coarse -> fine, 1/32 .. 1/2 of the grid
    up_preds: list[Tensor4]       # (H/4, W/4) then (H/2, W/2)
    refine_preds: list[Tensor4]   # all at (H/2, W/2)
    final_tensor: Tensor4         # (1, 2, H, W)

    @property
    def y_lidar(self) -> Tensor4:
        return self.lidar_preds[-1]

    @property
    def y_up(self) -> Tensor4:
        return self.up_preds[-1]

    @property
    def y_end(self) -> Tensor4:
        return self.refine_preds[-1]

    @property
    def final(self) -> FlowField:
        return FlowField(self.final_tensor.data[0].transpose(1, 2, 0))

    def sites(self) -> list[tuple[str, Tensor4]]:
        named = [(f"lidar_{2 ** (len(self.lidar_preds) - i)}", p)
                 for i, p in enumerate(self.lidar_preds)]
        named += [(f"up_{2 ** (len(self.up_preds) - k)}", p)
                  for k, p in enumerate(self.up_preds)]
        named += [(f"refine_{k + 1}", p) for k, p in enumerate(self.refine_preds)]
        return named


def _layer(params: NetworkParams, name: str, x: Tensor4,
           activation: bool | None = None) -> Tensor4:
    sp = params.plan.layers[name]
    fn = ops.conv2d if sp.kind == "conv" else ops.deconv2d
    y = fn(x, params.weight(name), params.bias(name), stride=sp.stride, pad=sp.pad)
    act = sp.activation if activation is None else activation
    if act:
        y = ops.leaky_relu(y, params.config.leaky_slope)
    if y.dims[2:] != sp.out_hw:
        raise ShapeError(f"{name}: produced {y.dims[2:]}, planned {sp.out_hw}")
    return y


def _as_input(x, params: NetworkParams) -> Tensor4:
    if isinstance(x, RangeImage):
        return x.to_tensor(params.dtype)
    if isinstance(x, Tensor4):
        if x.data.dtype != params.dtype:
            return Tensor4(x.data.astype(params.dtype), requires_grad=x.requires_grad)
        return x
    raise ShapeError(f"network input must be RangeImage or Tensor4, got {type(x)}")


def forward_lidar_flow(params: NetworkParams, x_t, x_t1
                       ) -> tuple[Tensor4, list[Tensor4]]:
    cfg = params.config
    xt = _as_input(x_t, params)
    xt1 = _as_input(x_t1, params)
    want = (cfg.spec.rows, cfg.spec.cols)
    if xt.dims[1:] != (2,) + want or xt1.dims[1:] != (2,) + want:
        raise ShapeError(f"lidar inputs must be (1, 2, {want[0]}, {want[1]})")

    x = ops.concat_channels(xt, xt1)
    feats: list[Tensor4] = []
    for i in range(1, cfg.contraction_levels + 1):
        x = _layer(params, f"lidar.conv{i}", x)
        feats.append(x)

    top = cfg.contraction_levels
    pred = _layer(params, f"lidar.pred{top}", feats[-1])
    preds = [pred]
    carry = feats[-1]
    for level in range(top - 1, 0, -1):
        up_feat = _layer(params, f"lidar.deconv{level}", carry)
        up_pred = ops.bilinear_upsample2x(pred)
        carry = ops.concat_channels(ops.concat_channels(feats[level - 1], up_feat),
                                    up_pred)
        pred = _layer(params, f"lidar.pred{level}", carry)
        preds.append(pred)
    return preds[-1], preds


def forward_domain_transform(params: NetworkParams, xp_t: Tensor4, xp_t1: Tensor4,
                             y_lidar: Tensor4
                             ) -> tuple[Tensor4, list[Tensor4], Tensor4]:
    cfg = params.config
    half = (cfg.spec.rows // 2, cfg.spec.cols // 2)
    for t in (xp_t, xp_t1, y_lidar):
        if t.dims[2:] != half:
            raise ShapeError(f"domain transform inputs must sit at {half}, got {t.dims}")

    x = ops.concat_channels(ops.concat_channels(xp_t, xp_t1), y_lidar)
    for s in range(1, cfg.dt_stages + 1):
        narrow = x
        for j in range(1, cfg.narrow_convs_per_stage + 1):
            narrow = _layer(params, f"up.s{s}.narrow{j}", narrow)
        wide = _layer(params, f"up.s{s}.wide", x)
        x = ops.concat_channels(narrow, wide)

    feats = x
    up_preds: list[Tensor4] = []
    carry = None
    for k in range(1, cfg.dt_upscale_stages + 1):
        feats = _layer(params, f"up.dec{k}", feats)
        pred = _layer(params, f"up.pred{k}", feats)
        up_preds.append(pred)
        carry = feats
        if k < cfg.dt_upscale_stages:
            feats = ops.concat_channels(feats, pred)
    return up_preds[-1], up_preds, carry


def forward_refinement(params: NetworkParams, y_up: Tensor4, carry_features: Tensor4
                       ) -> tuple[Tensor4, list[Tensor4]]:
    cfg = params.config
    pred, feats = y_up, carry_features
    preds: list[Tensor4] = []
    for i in range(1, cfg.refine_iters + 1):
        x = ops.concat_channels(feats, pred)
        for j in range(1, cfg.refine_convs_per_iter + 1):
            x = _layer(params, f"end.it{i}.conv{j}", x)
        feats = x
        pred = _layer(params, f"end.it{i}.pred", feats)
        preds.append(pred)
    return preds[-1], preds


def pooled_inputs(params: NetworkParams, x_t, x_t1) -> tuple[Tensor4, Tensor4]:
    """1/2-scale scan pair; sparse-aware pooling when validity is known."""
    def pool(x):
        valid = x.valid if isinstance(x, RangeImage) else None
        t = _as_input(x, params)
        pooled, _ = ops.avg_pool2x(t, valid)
        return pooled
    return pool(x_t), pool(x_t1)


def full_forward(params: NetworkParams, x_t, x_t1) -> ForwardOutputs:
    xp_t, xp_t1 = pooled_inputs(params, x_t, x_t1)
    y_lidar, lidar_preds = forward_lidar_flow(params, x_t, x_t1)
    y_up, up_preds, carry = forward_domain_transform(params, xp_t, xp_t1, y_lidar)
    _, refine_preds = forward_refinement(params, y_up, carry)
    final = ops.bilinear_upsample2x(refine_preds[-1])
    return ForwardOutputs(lidar_preds, up_preds, refine_preds, final)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _write_entry(f, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    f.write(struct.pack("<I", len(nb)))
    f.write(nb)
    f.write(struct.pack("<IIII", *arr.shape))
    f.write(arr.astype("<f4").tobytes())


def save_checkpoint(path, params: NetworkParams,
                    adam: dict[str, AdamState] | None = None) -> None:
    entries: list[tuple[str, np.ndarray]] = [
        (name, t.data) for name, t in params.tensors.items()]
    if adam:
        for name in params.tensors:
            st = adam.get(name)
            if st is None:
                continue
            entries.append((name + ".adam_m", st.m))
            entries.append((name + ".adam_v", st.v))
            entries.append((name + ".adam_t",
                            np.full((1, 1, 1, 1), float(st.t))))
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_entry(f, name, arr)


def _read_entries(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    (count,) = struct.unpack_from("<I", data, 4)
    pos = 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode()
        pos += nlen
        dims = struct.unpack_from("<IIII", data, pos)
        pos += 16
        n = int(np.prod(dims))
        arr = np.frombuffer(data, "<f4", n, pos).reshape(dims)
        pos += 4 * n
        out[name] = arr
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def load_checkpoint(path, cfg: NetworkConfig, dtype=np.float32
                    ) -> tuple[NetworkParams, dict[str, AdamState]]:
    entries = _read_entries(path)
    plan = plan_network(cfg)
    tensors: dict[str, Tensor4] = {}
    for sp in plan.layers.values():
        for suffix in (".w", ".b"):
            name = sp.name + suffix
            if name not in entries:
                raise FormatError(f"{path}: checkpoint lacks parameter {name}")
            tensors[name] = Tensor4(entries[name].astype(dtype), requires_grad=True)
    params = NetworkParams(cfg, plan, tensors)
    adam: dict[str, AdamState] = {}
    for name in tensors:
        if name + ".adam_m" in entries:
            adam[name] = AdamState(
                m=entries[name + ".adam_m"].astype(dtype),
                v=entries[name + ".adam_v"].astype(dtype),
                t=int(entries[name + ".adam_t"].reshape(())))
    return params, adam
