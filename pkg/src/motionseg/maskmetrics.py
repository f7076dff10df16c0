"""Mask comparison metrics.

IoU of two empty masks is defined as 1. With that convention the tile
average of :func:`local_iou` equals :func:`iou` for a full-image window and
:func:`pixel_accuracy` for a 1x1 window.
"""

import numpy as np
from scipy import ndimage


class ShapeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class EmptySelectionError(ValueError):
    pass


def _pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou(a, b):
    a, b = _pair(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def pixel_accuracy(a, b):
    a, b = _pair(a, b)
    return np.count_nonzero(a == b) / a.size


def _tile_sums(x, w, h):
    """Sum of x over tiles of h rows by w columns; partial tiles at the far edges."""
    rows = np.arange(0, x.shape[0], h)
    cols = np.arange(0, x.shape[1], w)
    return np.add.reduceat(np.add.reduceat(x, rows, axis=0), cols, axis=1)


def local_iou(a, b, w, h):
    """Per-pixel IoU of the w x h tile (stride = window) that contains the pixel."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ShapeError(f"expected 2-D masks, got shape {a.shape}")
    H, W = a.shape
    if not (1 <= w <= W and 1 <= h <= H):
        raise ParameterError(f"window ({w}, {h}) outside [1, {W}] x [1, {H}]")
    inter = _tile_sums((a & b).astype(np.int64), w, h)
    union = _tile_sums((a | b).astype(np.int64), w, h)
    tiles = np.ones(inter.shape)
    nz = union > 0
    tiles[nz] = inter[nz] / union[nz]
    return np.repeat(np.repeat(tiles, h, axis=0)[:H], w, axis=1)[:, :W]


def binarize(m, eps):
    """1 where ``m >= eps``; ties go to foreground."""
    if not 0.0 <= eps <= 1.0:
        raise ParameterError(f"threshold must lie in [0, 1], got {eps}")
    return np.asarray(m) >= eps


def effective_iou(gt, pseudo, sel):
    """IoU between ``gt`` and ``pseudo`` counted only over selected pixels."""
    gt, pseudo = _pair(gt, pseudo)
    sel = np.asarray(sel, dtype=bool)
    if sel.shape != gt.shape:
        raise ShapeError(f"selection shape {sel.shape} != mask shape {gt.shape}")
    if not sel.any():
        raise EmptySelectionError("selection is empty")
    union = np.count_nonzero((gt | pseudo) & sel)
    if union == 0:
        return 1.0
    return np.count_nonzero(gt & pseudo & sel) / union


_EIGHT = np.ones((3, 3), dtype=bool)


def connected_components(m):
    """8-connected labelling; labels 1..n follow the row-major order of each blob's first pixel.

    Returns ``(labels, n)``; background is 0.
    """
    labels, n = ndimage.label(np.asarray(m, dtype=bool), structure=_EIGHT)
    return labels, n


def bounding_boxes(labels, n):
    return ndimage.find_objects(labels, max_label=n)


def per_tool_ious(gt, noisy):
    """IoU of the crops defined by each gt component's bounding box, in label order."""
    gt, noisy = _pair(gt, noisy)
    labels, n = connected_components(gt)
    out = []
    for box in bounding_boxes(labels, n):
        out.append(iou(gt[box], noisy[box]))
    return out
