"""Slow, obviously-correct reference implementations used by the tests.

None of these import the package; they are written from the definitions.
"""

import math
from collections import deque

import numpy as np


def minkowski(mask, radius, mode):
    """Erosion/dilation by the lattice disc x^2 + y^2 <= radius^2, pixel by pixel.

    Pixels outside the image count as background.
    """
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    r = int(math.floor(radius + 1e-9))
    offs = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
            if dy * dy + dx * dx <= radius * radius + 1e-9]
    out = np.zeros_like(mask)
    for y in range(H):
        for x in range(W):
            vals = []
            for dy, dx in offs:
                yy, xx = y + dy, x + dx
                vals.append(0 <= yy < H and 0 <= xx < W and mask[yy, xx])
            out[y, x] = all(vals) if mode == "erode" else any(vals)
    return out


def flood_components(mask):
    """8-connected components by BFS; returns a list of pixel sets."""
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    seen = np.zeros_like(mask)
    comps = []
    for y in range(H):
        for x in range(W):
            if mask[y, x] and not seen[y, x]:
                comp, q = set(), deque([(y, x)])
                seen[y, x] = True
                while q:
                    cy, cx = q.popleft()
                    comp.add((cy, cx))
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx = cy + dy, cx + dx
                            if 0 <= ny < H and 0 <= nx < W and mask[ny, nx] and not seen[ny, nx]:
                                seen[ny, nx] = True
                                q.append((ny, nx))
                comps.append(comp)
    return comps


def iou_sets(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    inter = sum(1 for v in (a & b).ravel() if v)
    union = sum(1 for v in (a | b).ravel() if v)
    return 1.0 if union == 0 else inter / union


def local_iou_loops(a, b, w, h):
    """For every pixel, the IoU of the tile [ty*h, ty*h+h) x [tx*w, tx*w+w) that contains it."""
    H, W = a.shape
    out = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            y0, x0 = (y // h) * h, (x // w) * w
            out[y, x] = iou_sets(a[y0:y0 + h, x0:x0 + w], b[y0:y0 + h, x0:x0 + w])
    return out


def bce(p, t, eps=1e-7):
    p = np.clip(p, eps, 1 - eps)
    return -(t * np.log(p) + (1 - t) * np.log(1 - p))


def proxy_loss_np(y_p, y_t, alpha=0.8, eps=1e-7):
    inter = (y_p * y_t).sum()
    union = (y_p + y_t - y_p * y_t).sum()
    ratio = min(max((inter + eps) / (union + eps), eps), 1.0)
    return alpha * -math.log(ratio) + (1 - alpha) * bce(y_p, y_t, eps).mean()


def student_loss_np(y_s, y_t, sel, alpha=0.8, eps=1e-7, prefactor=True):
    n = sel.sum()
    inter = (sel * y_s * y_t).sum()
    union = (sel * (y_s + y_t - y_s * y_t)).sum()
    ratio = min(max((inter + eps) / (union + eps), eps), 1.0)
    l_iou = -math.log(ratio) / (n if prefactor else 1.0)
    return alpha * l_iou + (1 - alpha) * (sel * bce(y_s, y_t, eps)).sum() / n


def paired_t(a, b):
    d = [x - y for x, y in zip(a, b)]
    n = len(d)
    m = sum(d) / n
    sd = math.sqrt(sum((v - m) ** 2 for v in d) / (n - 1))
    return m / (sd / math.sqrt(n))


def cohens_d(a, b):
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    va = sum((v - ma) ** 2 for v in a) / (len(a) - 1)
    vb = sum((v - mb) ** 2 for v in b) / (len(b) - 1)
    sp = math.sqrt(((len(a) - 1) * va + (len(b) - 1) * vb) / (len(a) + len(b) - 2))
    return (ma - mb) / sp
