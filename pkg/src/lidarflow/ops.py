"""Layer primitives on Tensor4 values, each with its reverse-mode rule.

Convolutions use im2col plus one BLAS matmul. Padding is a per-side
(top, bottom, left, right) quantity and may be negative, in which case the
side is cropped instead of padded; the expansion stages of the domain
transform rely on this to hit scheduled feature-map sizes exactly.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .autodiff import Tensor4, record
from .errors import EmptyMaskError, GeometryError, ShapeError

Pad4 = tuple[int, int, int, int]
Stride2 = tuple[int, int]


def _as_stride2(stride) -> Stride2:
    if isinstance(stride, int):
        return (stride, stride)
    sy, sx = stride
    return (int(sy), int(sx))


def _as_pad4(pad) -> Pad4:
    if isinstance(pad, int):
        return (pad, pad, pad, pad)
    if len(pad) == 2:
        ph, pw = pad
        return (int(ph), int(ph), int(pw), int(pw))
    pt, pb, pl, pr = pad
    return (int(pt), int(pb), int(pl), int(pr))


def _apply_pad(x: np.ndarray, pad: Pad4) -> np.ndarray:
    """Pad (positive) or crop (negative) the two spatial axes per side."""
    pt, pb, pl, pr = pad
    if pt == pb == pl == pr == 0:
        return x
    b, c, h, w = x.shape
    he, we = h + pt + pb, w + pl + pr
    if he < 1 or we < 1:
        raise GeometryError(f"padding {pad} empties a {h}x{w} input")
    out = np.zeros((b, c, he, we), dtype=x.dtype)
    src_r = slice(max(0, -pt), h - max(0, -pb))
    src_c = slice(max(0, -pl), w - max(0, -pr))
    dst_r = slice(max(0, pt), he - max(0, pb))
    dst_c = slice(max(0, pl), we - max(0, pr))
    out[:, :, dst_r, dst_c] = x[:, :, src_r, src_c]
    return out


def _unapply_pad(g_padded: np.ndarray, orig_hw: tuple[int, int], pad: Pad4) -> np.ndarray:
    """Adjoint of _apply_pad: route gradients back to the original extent."""
    pt, pb, pl, pr = pad
    if pt == pb == pl == pr == 0:
        return g_padded
    b, c, he, we = g_padded.shape
    h, w = orig_hw
    out = np.zeros((b, c, h, w), dtype=g_padded.dtype)
    src_r = slice(max(0, -pt), h - max(0, -pb))
    src_c = slice(max(0, -pl), w - max(0, -pr))
    dst_r = slice(max(0, pt), he - max(0, pb))
    dst_c = slice(max(0, pl), we - max(0, pr))
    out[:, :, src_r, src_c] = g_padded[:, :, dst_r, dst_c]
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, sy: int, sx: int) -> np.ndarray:
    b, c, h, w = xp.shape
    ho = (h - kh) // sy + 1
    wo = (w - kw) // sx + 1
    sb, sc, sh, sw = xp.strides
    patches = as_strided(xp, (b, c, kh, kw, ho, wo),
                         (sb, sc, sh, sw, sy * sh, sx * sw))
    return patches.reshape(b, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int],
            kh: int, kw: int, sy: int, sx: int,
            ho: int, wo: int) -> np.ndarray:
    b, c, h, w = shape
    out = np.zeros(shape, dtype=cols.dtype)
    cols6 = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sy * ho:sy, j:j + sx * wo:sx] += cols6[:, :, i, j]
    return out


def _check_bias(bias: Tensor4 | None, out_ch: int, name: str) -> None:
    if bias is not None and bias.dims != (1, out_ch, 1, 1):
        raise ShapeError(f"{name}: bias dims {bias.dims} != (1, {out_ch}, 1, 1)")


def conv2d(x: Tensor4, weight: Tensor4, bias: Tensor4 | None = None,
           stride=1, pad=0) -> Tensor4:
    """2-D convolution; weight dims (out_ch, in_ch, kh, kw)."""
    sy, sx = _as_stride2(stride)
    pad4 = _as_pad4(pad)
    out_ch, in_ch, kh, kw = weight.dims
    b, c, h, w = x.dims
    if c != in_ch:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {in_ch}")
    _check_bias(bias, out_ch, "conv2d")
    he = h + pad4[0] + pad4[1]
    we = w + pad4[2] + pad4[3]
    ho = (he - kh) // sy + 1
    wo = (we - kw) // sx + 1
    if he < kh or ho < 1:
        raise GeometryError(f"conv2d: non-positive output height ({h} rows, pad {pad4}, kernel {kh})")
    if we < kw or wo < 1:
        raise GeometryError(f"conv2d: non-positive output width ({w} cols, pad {pad4}, kernel {kw})")

    xp = _apply_pad(x.data, pad4)
    cols = _im2col(xp, kh, kw, sy, sx)
    wmat = weight.data.reshape(out_ch, in_ch * kh * kw)
    y = np.matmul(wmat, cols).reshape(b, out_ch, ho, wo)
    if bias is not None:
        y = y + bias.data

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def rule(g: np.ndarray):
        gf = g.reshape(b, out_ch, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gf)
            gxp = _col2im(gcols, xp.shape, kh, kw, sy, sx, ho, wo)
            gx = _unapply_pad(gxp, (h, w), pad4)
        if weight.requires_grad:
            gw = np.einsum('bon,bkn->ok', gf, cols).reshape(weight.dims)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, out_ch, 1, 1)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return record(y, inputs, rule, "conv2d")


def deconv2d(x: Tensor4, weight: Tensor4, bias: Tensor4 | None = None,
             stride=1, pad=0) -> Tensor4:
    """Transposed convolution (adjoint of conv2d in its input slot).

    Weight dims (in_ch, out_ch, kh, kw); output size per axis is
    (in - 1) * stride + kernel - pad_total.
    """
    sy, sx = _as_stride2(stride)
    pad4 = _as_pad4(pad)
    in_ch, out_ch, kh, kw = weight.dims
    b, c, h, w = x.dims
    if c != in_ch:
        raise ShapeError(f"deconv2d: input has {c} channels, weight expects {in_ch}")
    _check_bias(bias, out_ch, "deconv2d")
    h_full = (h - 1) * sy + kh
    w_full = (w - 1) * sx + kw
    ho = h_full - pad4[0] - pad4[1]
    wo = w_full - pad4[2] - pad4[3]
    if ho < 1:
        raise GeometryError(f"deconv2d: non-positive output height ({h} rows, pad {pad4}, kernel {kh})")
    if wo < 1:
        raise GeometryError(f"deconv2d: non-positive output width ({w} cols, pad {pad4}, kernel {kw})")

    wmat = weight.data.reshape(in_ch, out_ch * kh * kw)
    xf = x.data.reshape(b, in_ch, h * w)
    gcols = np.matmul(wmat.T, xf)
    full = _col2im(gcols, (b, out_ch, h_full, w_full), kh, kw, sy, sx, h, w)
    neg = (-pad4[0], -pad4[1], -pad4[2], -pad4[3])
    y = _apply_pad(full, neg)
    if bias is not None:
        y = y + bias.data

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def rule(g: np.ndarray):
        gx = gw = gb = None
        g_cols = None
        if x.requires_grad or weight.requires_grad:
            gp = _apply_pad(g, pad4)
            g_cols = _im2col(gp, kh, kw, sy, sx)
        if x.requires_grad:
            gx = np.matmul(wmat, g_cols).reshape(b, in_ch, h, w)
        if weight.requires_grad:
            gw = np.einsum('bin,bkn->ik', xf, g_cols).reshape(weight.dims)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3)).reshape(1, out_ch, 1, 1)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return record(y, inputs, rule, "deconv2d")


def leaky_relu(x: Tensor4, slope: float = 0.1) -> Tensor4:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    gate = x.data >= 0
    y = np.where(gate, x.data, x.data * slope)

    def rule(g: np.ndarray):
        return (np.where(gate, g, g * slope),)

    return record(y, (x,), rule, "leaky_relu")


def concat_channels(a: Tensor4, b: Tensor4) -> Tensor4:
    ba, ca, ha, wa = a.dims
    bb, cb, hb, wb = b.dims
    if (ba, ha, wa) != (bb, hb, wb):
        raise ShapeError(f"concat_channels: spatial/batch mismatch {a.dims} vs {b.dims}")
    y = np.concatenate([a.data, b.data], axis=1)

    def rule(g: np.ndarray):
        return (np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:]))

    return record(y, (a, b), rule, "concat_channels")


def _interp_matrix(n: int, dtype) -> np.ndarray:
    """Row-stochastic (2n, n) matrix for 2x bilinear upsampling.

    Output sample j reads source coordinate (j + 0.5) / 2 - 0.5, clamped at
    the borders (align-corners-false convention).
    """
    src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    i0 = np.floor(src).astype(int)
    frac = src - i0
    i0c = np.clip(i0, 0, n - 1)
    i1c = np.clip(i0 + 1, 0, n - 1)
    mat = np.zeros((2 * n, n), dtype=dtype)
    rows = np.arange(2 * n)
    np.add.at(mat, (rows, i0c), (1.0 - frac).astype(dtype))
    np.add.at(mat, (rows, i1c), frac.astype(dtype))
    return mat


def bilinear_upsample2x(x: Tensor4) -> Tensor4:
    """Double both spatial dims by separable bilinear interpolation."""
    b, c, h, w = x.dims
    gh = _interp_matrix(h, x.data.dtype)
    gw = _interp_matrix(w, x.data.dtype)
    y = np.einsum('ph,bchw->bcpw', gh, x.data)
    y = np.einsum('qw,bcpw->bcpq', gw, y)

    def rule(g: np.ndarray):
        gx = np.einsum('qw,bcpq->bcpw', gw, g)
        gx = np.einsum('ph,bcpw->bchw', gh, gx)
        return (gx,)

    return record(y, (x,), rule, "bilinear_upsample2x")


def avg_pool2x(x: Tensor4, valid: np.ndarray | None = None
               ) -> tuple[Tensor4, np.ndarray | None]:
    """Halve both spatial dims by 2x2 mean pooling.

    Dense mode (valid is None) averages all four cells. Sparse mode averages
    only the valid cells of each block; a block with no valid cell yields the
    0 sentinel and an invalid output cell. Returns (pooled, pooled_validity);
    the validity is None in dense mode.
    """
    b, c, h, w = x.dims
    if h % 2 or w % 2:
        raise GeometryError(f"avg_pool2x requires even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2

    if valid is None:
        y = x.data.reshape(b, c, ho, 2, wo, 2).mean(axis=(3, 5))

        def rule(g: np.ndarray):
            gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0
            return (gx.astype(x.data.dtype),)

        return record(y, (x,), rule, "avg_pool2x"), None

    if valid.shape != (h, w):
        raise ShapeError(f"avg_pool2x: validity shape {valid.shape} != ({h}, {w})")
    vmask = valid.astype(x.data.dtype)
    counts = vmask.reshape(ho, 2, wo, 2).sum(axis=(1, 3))
    denom = np.maximum(counts, 1.0)
    masked = x.data * vmask[None, None]
    sums = masked.reshape(b, c, ho, 2, wo, 2).sum(axis=(3, 5))
    y = sums / denom[None, None]
    out_valid = counts > 0
    y = y * out_valid[None, None]

    def rule(g: np.ndarray):
        spread = np.repeat(np.repeat(g / denom[None, None], 2, axis=2), 2, axis=3)
        return ((spread * vmask[None, None]).astype(x.data.dtype),)

    return record(y, (x,), rule, "avg_pool2x"), out_valid


def masked_epe_loss(pred: Tensor4, gt, valid: np.ndarray | None = None) -> Tensor4:
    """Mean Euclidean norm of (pred - gt) over the valid pixels.

    pred must be a 2-channel flow tensor; gt is a matching constant tensor or
    array. With no valid pixel the term is undefined and the caller must skip
    it, so an EmptyMaskError is raised.
    """
    gt_arr = gt.data if isinstance(gt, Tensor4) else np.asarray(gt)
    b, c, h, w = pred.dims
    if c != 2:
        raise ShapeError(f"masked_epe_loss: pred must have 2 channels, got {c}")
    if gt_arr.shape != pred.dims:
        raise ShapeError(f"masked_epe_loss: gt shape {gt_arr.shape} != pred dims {pred.dims}")
    if valid is None:
        valid = np.ones((h, w), dtype=bool)
    if valid.shape != (h, w):
        raise ShapeError(f"masked_epe_loss: mask shape {valid.shape} != ({h}, {w})")
    n = b * int(valid.sum())
    if n == 0:
        raise EmptyMaskError("masked_epe_loss: no valid pixels")

    diff = pred.data - gt_arr
    norm = np.sqrt(diff[:, 0] ** 2 + diff[:, 1] ** 2)  # (b, h, w)
    total = norm[:, valid].sum() / n
    y = np.full((1, 1, 1, 1), total, dtype=pred.data.dtype)

    def rule(g: np.ndarray):
        gs = float(g.reshape(()))
        safe = np.where(norm > 0, norm, 1.0)
        scale_map = np.where(norm > 0, valid[None] / safe, 0.0) * (gs / n)
        return ((diff * scale_map[:, None]).astype(pred.data.dtype),)

    return record(y, (pred,), rule, "masked_epe_loss")


def sum_tensor(x: Tensor4) -> Tensor4:
    y = np.full((1, 1, 1, 1), x.data.sum(), dtype=x.data.dtype)

    def rule(g: np.ndarray):
        return (np.full_like(x.data, float(g.reshape(()))),)

    return record(y, (x,), rule, "sum_tensor")


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    if a.dims != b.dims:
        raise ShapeError(f"add: dims {a.dims} != {b.dims}")

    def rule(g: np.ndarray):
        return (g, g.copy())

    return record(a.data + b.data, (a, b), rule, "add")


def scale(a: Tensor4, s: float) -> Tensor4:
    s = float(s)

    def rule(g: np.ndarray):
        return (g * s,)

    return record(a.data * s, (a,), rule, "scale")
