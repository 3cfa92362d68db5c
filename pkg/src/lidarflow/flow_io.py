"""Dense flow fields, their interchange formats, and the color-wheel rendering.

Formats, all little-endian unless stated:

* ``.flo``: float32 magic 202021.25, int32 width, int32 height, then
  interleaved (u, v) float32 row-major. No validity channel.
* KITTI flow PNG: 16-bit RGB where channel0 = round(u * 64 + 2**15),
  channel1 = round(v * 64 + 2**15), channel2 = validity (0/1).
* PPM P6 for visualizations (binary, 8-bit RGB).

The PNG layer is a minimal self-contained codec (stdlib zlib) supporting
8/16-bit grayscale and RGB, enough for the KITTI encoding, the rendered
visualizations, and mask images.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

FLO_MAGIC = 202021.25


@dataclass
class FlowField:
    """Per-pixel (u rightward, v downward) displacements in pixels.

    ``valid`` is an optional boolean mask; absent means every pixel carries
    ground truth.
    """

    flow: np.ndarray                 # (H, W, 2) float
    valid: np.ndarray | None = None  # (H, W) bool

    def __post_init__(self):
        self.flow = np.asarray(self.flow, dtype=np.float64)
        if self.flow.ndim != 3 or self.flow.shape[2] != 2:
            raise ShapeError(f"flow must be (H, W, 2), got {self.flow.shape}")
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.flow.shape[:2]:
                raise ShapeError(
                    f"valid shape {self.valid.shape} != {self.flow.shape[:2]}")
        mask = self.valid if self.valid is not None else np.ones(self.flow.shape[:2], bool)
        if not np.all(np.isfinite(self.flow[mask])):
            raise ShapeError("non-finite flow at valid pixels")

    @property
    def shape(self) -> tuple[int, int]:
        return self.flow.shape[:2]  # type: ignore[return-value]

    def valid_mask(self) -> np.ndarray:
        if self.valid is None:
            return np.ones(self.flow.shape[:2], dtype=bool)
        return self.valid


# ---------------------------------------------------------------------------
# Middlebury .flo
# ---------------------------------------------------------------------------

def write_flo(path, field: FlowField) -> None:
    if field.valid is not None and not field.valid.all():
        raise FormatError(".flo cannot encode validity holes")
    h, w = field.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(field.flow.astype("<f4").tobytes())


def read_flo(path) -> FlowField:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: too short for a .flo header")
    magic, w, h = struct.unpack_from("<fii", data, 0)
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic {magic!r}")
    want = 12 + 2 * w * h * 4
    if len(data) != want:
        raise FormatError(f"{path}: expected {want} bytes for {w}x{h}, got {len(data)}")
    flow = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2)
    return FlowField(flow.astype(np.float64))


# ---------------------------------------------------------------------------
# Minimal PNG codec
# ---------------------------------------------------------------------------

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))


def png_encode(img: np.ndarray) -> bytes:
    """Encode (H, W) grayscale or (H, W, 3) RGB, dtype uint8 or uint16."""
    if img.dtype == np.uint8:
        depth = 8
    elif img.dtype == np.uint16:
        depth = 16
    else:
        raise FormatError(f"png_encode: unsupported dtype {img.dtype}")
    if img.ndim == 2:
        color = 0
    elif img.ndim == 3 and img.shape[2] == 3:
        color = 2
    else:
        raise FormatError(f"png_encode: unsupported shape {img.shape}")
    h, w = img.shape[:2]
    big = img.astype(">u2") if depth == 16 else img
    rows = big.reshape(h, -1).view(np.uint8).reshape(h, -1)
    raw = b"".join(b"\x00" + r.tobytes() for r in rows)
    ihdr = struct.pack(">IIBBBBB", w, h, depth, color, 0, 0, 0)
    return (_PNG_SIG + _chunk(b"IHDR", ihdr)
            + _chunk(b"IDAT", zlib.compress(raw, 6)) + _chunk(b"IEND", b""))


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def png_decode(data: bytes) -> tuple[np.ndarray, int, int]:
    """Decode a (possibly foreign) PNG; returns (array, bit_depth, color_type)."""
    if data[:8] != _PNG_SIG:
        raise FormatError("not a PNG file")
    pos = 8
    ihdr = None
    idat = bytearray()
    while pos + 8 <= len(data):
        (length,), tag = struct.unpack_from(">I", data, pos), data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat.extend(payload)
        elif tag == b"IEND":
            break
    if ihdr is None:
        raise FormatError("PNG without IHDR")
    w, h, depth, color, comp, filt, interlace = ihdr
    if comp != 0 or filt != 0 or interlace != 0:
        raise FormatError("unsupported PNG compression/filter/interlace mode")
    if color not in (0, 2) or depth not in (8, 16):
        raise FormatError(f"unsupported PNG color type {color} / depth {depth}")
    channels = 1 if color == 0 else 3
    bpp = channels * depth // 8
    stride = w * bpp
    raw = zlib.decompress(bytes(idat))
    if len(raw) != h * (stride + 1):
        raise FormatError("PNG payload size mismatch")

    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for y in range(h):
        ftype = raw[y * (stride + 1)]
        line = np.frombuffer(raw, np.uint8, stride, y * (stride + 1) + 1).copy()
        if ftype == 0:
            rec = line
        elif ftype == 1:  # Sub
            rec = line
            for i in range(bpp, stride):
                rec[i] = (int(rec[i]) + int(rec[i - bpp])) & 0xFF
        elif ftype == 2:  # Up
            rec = (line.astype(np.uint16) + prev) % 256
            rec = rec.astype(np.uint8)
        elif ftype == 3:  # Average
            rec = line
            for i in range(stride):
                left = int(rec[i - bpp]) if i >= bpp else 0
                rec[i] = (int(rec[i]) + (left + int(prev[i])) // 2) & 0xFF
        elif ftype == 4:  # Paeth
            rec = line
            for i in range(stride):
                left = int(rec[i - bpp]) if i >= bpp else 0
                ul = int(prev[i - bpp]) if i >= bpp else 0
                rec[i] = (int(rec[i]) + _paeth(left, int(prev[i]), ul)) & 0xFF
        else:
            raise FormatError(f"unknown PNG filter type {ftype}")
        out[y] = rec
        prev = out[y]

    if depth == 16:
        arr = out.reshape(h, w * channels, 2)
        arr = (arr[:, :, 0].astype(np.uint16) << 8) | arr[:, :, 1]
    else:
        arr = out
    arr = arr.reshape((h, w) if channels == 1 else (h, w, 3))
    return arr, depth, color


def write_png(path, img: np.ndarray) -> None:
    Path(path).write_bytes(png_encode(img))


def read_png(path) -> np.ndarray:
    arr, _, _ = png_decode(Path(path).read_bytes())
    return arr


# ---------------------------------------------------------------------------
# KITTI 16-bit flow PNG
# ---------------------------------------------------------------------------

def write_kitti_png(path, field: FlowField) -> None:
    h, w = field.shape
    valid = field.valid_mask()
    flow = np.where(valid[:, :, None], field.flow, 0.0)
    if np.any(np.abs(flow[valid]) >= 512):
        raise FormatError("flow magnitude out of the encodable range (|u|,|v| < 512)")
    enc = np.floor(flow * 64.0 + 2 ** 15 + 0.5)
    if enc.min() < 0 or enc.max() > 65535:
        raise FormatError("quantized flow exceeds the 16-bit range")
    img = np.zeros((h, w, 3), dtype=np.uint16)
    img[:, :, 0] = enc[:, :, 0]
    img[:, :, 1] = enc[:, :, 1]
    img[:, :, 2] = valid.astype(np.uint16)
    write_png(path, img)


def read_kitti_png(path) -> FlowField:
    arr, depth, color = png_decode(Path(path).read_bytes())
    if depth != 16 or color != 2:
        raise FormatError(f"{path}: KITTI flow PNG must be 16-bit RGB")
    valid = arr[:, :, 2] > 0
    flow = np.zeros(arr.shape[:2] + (2,), dtype=np.float64)
    flow[:, :, 0] = (arr[:, :, 0].astype(np.float64) - 2 ** 15) / 64.0
    flow[:, :, 1] = (arr[:, :, 1].astype(np.float64) - 2 ** 15) / 64.0
    flow[~valid] = 0.0
    return FlowField(flow, valid)


# ---------------------------------------------------------------------------
# Color-wheel rendering
# ---------------------------------------------------------------------------

def _make_colorwheel() -> np.ndarray:
    # Classic 55-entry wheel; rightward flow lands on the magenta-red edge.
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[col:col + ry, 0] = 255
    wheel[col:col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    return wheel


_WHEEL = _make_colorwheel()


def flow_to_color(field: FlowField, max_mag: float | None = None) -> np.ndarray:
    """Render flow as an (H, W, 3) uint8 image.

    Hue encodes direction on the Middlebury wheel, brightness falls with
    magnitude / max_mag (clamped to 1); zero flow is white, invalid pixels
    black. max_mag defaults to the 99th-percentile magnitude over valid
    pixels. Normalization happens before any direction math, so the image
    depends only on flow / max_mag.
    """
    valid = field.valid_mask()
    mag = np.sqrt(field.flow[:, :, 0] ** 2 + field.flow[:, :, 1] ** 2)
    if max_mag is None:
        vals = mag[valid]
        max_mag = float(np.percentile(vals, 99)) if vals.size else 1.0
        if max_mag <= 0:
            max_mag = 1.0
    elif max_mag <= 0:
        raise ValueError("max_mag must be positive")

    u = field.flow[:, :, 0] / max_mag
    v = field.flow[:, :, 1] / max_mag
    rad = np.minimum(np.sqrt(u ** 2 + v ** 2), 1.0)
    angle = np.arctan2(-v, -u) / np.pi
    ncols = _WHEEL.shape[0]
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    col = (1 - f)[:, :, None] * _WHEEL[k0] / 255.0 + f[:, :, None] * _WHEEL[k1] / 255.0
    col = 1.0 - rad[:, :, None] * (1.0 - col)
    img = np.floor(255.0 * col + 0.5).astype(np.uint8)
    img[~valid] = 0
    return img


# ---------------------------------------------------------------------------
# PPM P6
# ---------------------------------------------------------------------------

def write_ppm(path, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ShapeError(f"PPM wants (H, W, 3) uint8, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6" or len(parts) < 4:
        raise FormatError(f"{path}: not a binary PPM")
    w, h = (int(x) for x in parts[1].split())
    if parts[2] != b"255":
        raise FormatError(f"{path}: unsupported maxval")
    return np.frombuffer(parts[3][:h * w * 3], np.uint8).reshape(h, w, 3).copy()
