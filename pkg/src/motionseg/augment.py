"""Spatial augmentation (random crop + flips), flow rotation, flow normalization and colorization.

Arrays are (H, W) or (H, W, C); flows are (H, W, 2) with channels (u, v).
The torch helpers operate on batches laid out as (N, 2, H, W).
"""

from dataclasses import dataclass

import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb
from scipy import ndimage


@dataclass
class AugmentSpec:
    p_flip_lr: float = 0.5
    p_flip_ud: float = 0.5
    min_crop_fraction: float = 224 / 256

    def validate(self):
        if not 0.0 < self.min_crop_fraction <= 1.0:
            raise ValueError(f"min_crop_fraction must lie in (0, 1], got {self.min_crop_fraction}")
        for p in (self.p_flip_lr, self.p_flip_ud):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"flip probability must lie in [0, 1], got {p}")
        return self


@dataclass(frozen=True)
class RandomDraw:
    """One realised augmentation: crop rectangle (top, left, height, width) then flips."""
    crop: tuple
    flip_lr: bool = False
    flip_ud: bool = False


def identity_draw(shape):
    return RandomDraw((0, 0, shape[0], shape[1]))


def draw_augmentation(spec, shape, rng):
    H, W = shape[:2]
    ch = int(rng.integers(int(np.ceil(spec.min_crop_fraction * H)), H + 1))
    cw = int(rng.integers(int(np.ceil(spec.min_crop_fraction * W)), W + 1))
    top = int(rng.integers(0, H - ch + 1))
    left = int(rng.integers(0, W - cw + 1))
    flip_lr = bool(rng.random() < spec.p_flip_lr)
    flip_ud = bool(rng.random() < spec.p_flip_ud)
    return RandomDraw((top, left, ch, cw), flip_lr, flip_ud)


def _src_coords(start, extent, n):
    return start + (np.arange(n) + 0.5) * extent / n - 0.5


def _nearest_idx(start, extent, n):
    idx = start + np.floor((np.arange(n) + 0.5) * extent / n).astype(np.int64)
    return np.minimum(idx, start + extent - 1)


def augm_spatial(x, draw, kind="image"):
    """Crop to ``draw.crop``, resample back to full size, then flip.

    ``kind`` selects the resampler: "image" (bilinear), "mask" (nearest,
    stays binary) or "flow" (bilinear, with vectors rescaled by the zoom and
    sign-flipped with the image).
    """
    x = np.asarray(x)
    H, W = x.shape[:2]
    top, left, ch, cw = draw.crop
    if (top, left, ch, cw) == (0, 0, H, W):
        out = x.copy()
    elif kind == "mask":
        out = x[_nearest_idx(top, ch, H)][:, _nearest_idx(left, cw, W)]
    else:
        yy, xx = np.meshgrid(_src_coords(top, ch, H), _src_coords(left, cw, W), indexing="ij")
        planes = x[..., None] if x.ndim == 2 else x
        out = np.stack([ndimage.map_coordinates(planes[..., c].astype(np.float64), [yy, xx],
                                                order=1, mode="nearest")
                        for c in range(planes.shape[2])], axis=-1).astype(x.dtype)
        if x.ndim == 2:
            out = out[..., 0]
    if kind == "flow":
        out = out.astype(np.float32, copy=True)
        out[..., 0] *= W / cw
        out[..., 1] *= H / ch
    if draw.flip_lr:
        out = out[:, ::-1]
        if kind == "flow":
            out = out * np.array([-1.0, 1.0], dtype=out.dtype)
    if draw.flip_ud:
        out = out[::-1]
        if kind == "flow":
            out = out * np.array([1.0, -1.0], dtype=out.dtype)
    return np.ascontiguousarray(out)


def rotation_matrix(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def augm_flow_rotate(flow, theta):
    """Rotate every flow vector by ``theta``; pixels stay where they are."""
    R = rotation_matrix(theta)
    return np.asarray(flow, dtype=np.float64) @ R.T


def normalize_flow(flow):
    """Divide by the largest vector norm; an all-zero field is returned unchanged."""
    flow = np.asarray(flow, dtype=np.float64)
    peak = np.sqrt((flow ** 2).sum(axis=-1)).max()
    if peak == 0:
        return flow.copy()
    return flow / peak


def rotate_flow_torch(flow, theta):
    """(N, 2, H, W) flows rotated by per-sample angles ``theta`` (N,)."""
    c = torch.cos(theta).view(-1, 1, 1)
    s = torch.sin(theta).view(-1, 1, 1)
    u, v = flow[:, 0], flow[:, 1]
    return torch.stack([c * u - s * v, s * u + c * v], dim=1)


def normalize_flow_torch(flow):
    peak = torch.sqrt((flow ** 2).sum(dim=1)).flatten(1).amax(dim=1)
    peak = torch.where(peak > 0, peak, torch.ones_like(peak))
    return flow / peak.view(-1, 1, 1, 1)


def flow_to_color(flow, max_norm=None):
    """HSV colorization: direction sets hue, magnitude sets saturation, zero flow is white.

    Returns float RGB in [0, 1] with shape (H, W, 3).
    """
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    mag = np.hypot(u, v)
    if max_norm is None:
        max_norm = mag.max()
    hue = np.mod(np.arctan2(v, u), 2 * np.pi) / (2 * np.pi)
    sat = np.clip(mag / max_norm, 0.0, 1.0) if max_norm > 0 else np.zeros_like(mag)
    hsv = np.stack([hue, sat, np.ones_like(mag)], axis=-1)
    return hsv_to_rgb(hsv)
