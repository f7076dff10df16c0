"""Readers and writers for the on-disk formats: PNG frames/masks and Middlebury .flo."""

import struct
from pathlib import Path

import numpy as np
from PIL import Image

FLO_MAGIC = 202021.25


class FlowFormatError(ValueError):
    pass


def write_flo(path, flow):
    """Write an (H, W, 2) flow field as a Middlebury .flo file."""
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FlowFormatError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(np.ascontiguousarray(flow).tobytes())


def read_flo(path):
    """Read a Middlebury .flo file into an (H, W, 2) float32 array."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FlowFormatError(f"{path}: truncated header")
    magic, w, h = struct.unpack("<fii", data[:12])
    if magic != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {magic!r}")
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"{path}: bad size {w}x{h}")
    expected = 12 + 4 * 2 * w * h
    if len(data) != expected:
        raise FlowFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    flow = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2)
    return flow.astype(np.float32)


def write_image(path, img):
    """Write a float image in [0, 1] as 8-bit PNG (grayscale or RGB)."""
    img = np.asarray(img, dtype=np.float64)
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if u8.ndim == 3 and u8.shape[2] == 1:
        u8 = u8[..., 0]
    Image.fromarray(u8).save(path, optimize=False)


def read_image(path):
    """Read an 8-bit PNG as float32 in [0, 1]; shape (H, W) or (H, W, 3)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr


def write_mask(path, mask):
    """Masks are stored as 8-bit PNG with foreground 255 and background 0."""
    m = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(m).save(path, optimize=False)


def read_mask(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 127


def write_png16(path, values):
    """Store values in [0, 1] as 16-bit grayscale PNG (value * 65535)."""
    v = np.round(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 65535.0)
    Image.fromarray(v.astype(np.uint16)).save(path)


def read_png16(path):
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return arr / 65535.0
