"""Artificial label corruption: systematic erosion, erosion & dilation, tool drop.

All randomness is drawn per mask from ``default_rng([seed, i])``, so the
corrupted set is a fixed function of the ``CorruptionSpec``. Morphology uses lattice discs
``x^2 + y^2 <= r^2``; distinct discs only occur at the radii ``sqrt(s)`` for
``s`` a sum of two squares (0, 1, sqrt 2, 2, sqrt 5, ...). A radius between
two such disc radii applies the larger disc to the masks whose uniform draw
falls below the interpolation fraction and the smaller one to the rest; tool
drop removes a gt component when its uniform draw is below ``drop_prob``.
Holding the draws fixed makes the dataset-mean IoU monotone in the
intensity, which is what the calibration bisects on.
"""

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import fileio
from .maskmetrics import connected_components, iou

KINDS = ("systematic_erosion", "erosion_dilation", "tool_drop")
TARGETS = {"D80": 0.8, "D60": 0.6, "D40": 0.4, "D20": 0.2}


class CalibrationError(RuntimeError):
    pass


@dataclass
class CorruptionSpec:
    kind: str
    radius: float = 0.0
    drop_prob: float = 0.0
    seed: int = 0

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {KINDS}")
        if self.radius < 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError(f"drop_prob must lie in [0, 1], got {self.drop_prob}")
        return self


@dataclass
class CorruptionLevel:
    target_iou: float
    achieved_iou: float
    tolerance: float = 0.02
    expected_iou: float = None  # mean over replicate seeds, tool drop only

    @property
    def ok(self):
        return abs(self.achieved_iou - self.target_iou) <= self.tolerance


def _sq_level(radius):
    """Largest integer squared distance covered by a disc of this radius."""
    return int(math.floor(radius * radius + 1e-9))


def disc(radius):
    r = int(math.floor(radius + 1e-9))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx ** 2 + yy ** 2 <= _sq_level(radius)


def disc_radii(max_radius):
    """Radii at which the lattice disc changes, ascending, starting at 0."""
    n = int(math.floor(max_radius)) + 1
    sq = {x * x + y * y for x in range(n + 1) for y in range(x, n + 1)}
    return [math.sqrt(s) for s in sorted(sq) if s <= _sq_level(max_radius)]


def _sq_dist_to_background(m):
    """Squared distance from each pixel to the nearest background pixel (image exterior included)."""
    padded = np.pad(m, 1, constant_values=False)
    d = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    return np.rint(d * d).astype(np.int64)


def _sq_dist_to_foreground(m):
    if not m.any():
        return np.full(m.shape, np.iinfo(np.int64).max)
    d = ndimage.distance_transform_edt(~m)
    return np.rint(d * d).astype(np.int64)


def morph(m, radius, mode):
    """Binary erosion or dilation by a disc of the given radius.

    Pixels outside the image count as background. Implemented by
    thresholding exact squared Euclidean distances, which gives the same set
    as the Minkowski operation with ``disc(radius)``.
    """
    m = np.asarray(m, dtype=bool)
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    if mode not in ("erode", "dilate"):
        raise ValueError(f"mode must be 'erode' or 'dilate', got {mode!r}")
    level = _sq_level(radius)
    if level == 0:
        return m.copy()
    if mode == "erode":
        return _sq_dist_to_background(m) > level
    return _sq_dist_to_foreground(m) <= level


def _draws(seed, i):
    rng = np.random.default_rng([int(seed), int(i)])
    return rng.random(), bool(rng.random() < 0.5), rng


def _bracket(radius):
    """Adjacent disc radii (lo, hi) with lo <= radius < hi, and the fraction of the way to hi."""
    radii = disc_radii(radius + 2)
    k = max(i for i, r in enumerate(radii) if r <= radius + 1e-12)
    lo, hi = radii[k], radii[k + 1]
    return lo, hi, (radius - lo) / (hi - lo)


def _mask_radius(radius, u):
    lo, hi, f = _bracket(radius)
    return hi if u < f else lo


def tool_drop(gt, drop_prob, rng):
    labels, n = connected_components(gt)
    keep = rng.random(n) >= drop_prob
    return np.isin(labels, np.flatnonzero(keep) + 1)


def corrupt_one(gt, spec, i):
    u, erode, rng = _draws(spec.seed, i)
    if spec.kind == "tool_drop":
        return tool_drop(gt, spec.drop_prob, rng)
    r = _mask_radius(spec.radius, u)
    if spec.kind == "systematic_erosion" or erode:
        return morph(gt, r, "erode")
    return morph(gt, r, "dilate")


def corrupt_dataset(gts, spec):
    spec.validate()
    if len(gts) == 0:
        raise ValueError("empty mask list")
    return [corrupt_one(g, spec, i) for i, g in enumerate(gts)]


def dataset_mean_iou(gts, noisy):
    return float(np.mean([iou(g, n) for g, n in zip(gts, noisy)]))


class _MorphTable:
    """Per-mask IoU at integer radii from one distance transform per mask."""

    def __init__(self, gts, kind, seed):
        draws = [_draws(seed, i) for i in range(len(gts))]
        self.u = np.array([d[0] for d in draws])
        self.dist = []
        for g, (_, coin, _) in zip(gts, draws):
            if kind == "systematic_erosion" or coin:
                self.dist.append(("erode", g, _sq_dist_to_background(g)))
            else:
                self.dist.append(("dilate", g, _sq_dist_to_foreground(g)))
        self.rows = {}

    @staticmethod
    def _iou_at(mode, g, d, level):
        if level == 0:
            return 1.0
        out = d > level if mode == "erode" else d <= level
        return iou(g, out)

    def row(self, radius):
        level = _sq_level(radius)
        if level not in self.rows:
            self.rows[level] = np.array([self._iou_at(mode, g, d, level) for mode, g, d in self.dist])
        return self.rows[level]

    def __call__(self, radius):
        lo, hi, f = _bracket(radius)
        if f == 0:
            return float(self.row(lo).mean())
        return float(np.where(self.u < f, self.row(hi), self.row(lo)).mean())


def _drop_ious(gts, seed):
    """Per mask: component areas and draws, so IoU(p) = kept area / gt area."""
    recs = []
    for i, g in enumerate(gts):
        _, _, rng = _draws(seed, i)
        labels, n = connected_components(g)
        areas = np.bincount(labels.ravel(), minlength=n + 1)[1:]
        recs.append((areas, rng.random(n)))

    def f(p):
        vals = []
        for areas, u in recs:
            total = areas.sum()
            vals.append(1.0 if total == 0 else areas[u >= p].sum() / total)
        return float(np.mean(vals))
    return f


def _bisect(f, lo, hi, target, tol, iters=60):
    """f is non-increasing; return the argument whose value is closest to target."""
    best = min((lo, hi), key=lambda x: abs(f(x) - target))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        v = f(mid)
        if abs(v - target) < abs(f(best) - target):
            best = mid
        if abs(v - target) <= tol / 4:
            break
        if v > target:
            lo = mid
        else:
            hi = mid
    return best


def calibrate_corruption(gts, kind, target_iou, seed=0, tolerance=0.02, replicates=16):
    """Find the corruption intensity whose dataset-mean IoU against ``gts`` hits ``target_iou``."""
    if not 0.0 < target_iou <= 1.0:
        raise ValueError(f"target_iou must lie in (0, 1], got {target_iou}")
    if kind not in KINDS:
        raise ValueError(f"unknown corruption kind {kind!r}")
    gts = [np.asarray(g, dtype=bool) for g in gts]
    if not gts:
        raise ValueError("empty mask list")

    if kind == "tool_drop":
        f = _drop_ious(gts, seed)
        if f(1.0) > target_iou + tolerance:
            raise CalibrationError(f"target {target_iou} below the all-dropped floor {f(1.0):.3f}")
        p = 0.0 if f(0.0) <= target_iou + tolerance / 4 else _bisect(f, 0.0, 1.0, target_iou, tolerance)
        spec = CorruptionSpec(kind, drop_prob=float(p), seed=seed)
        achieved = f(p)
        expected = float(np.mean([_drop_ious(gts, seed + 1 + r)(p) for r in range(replicates)]))
        level = CorruptionLevel(target_iou, achieved, tolerance, expected)
    else:
        f = _MorphTable(gts, kind, seed)
        r_max = float(max(g.shape[0] for g in gts))
        if f(r_max) > target_iou + tolerance:
            raise CalibrationError(f"target {target_iou} unreachable: IoU at radius {r_max} is {f(r_max):.3f}")
        hi = 1.0
        while f(hi) > target_iou and hi < r_max:
            hi = min(2 * hi, r_max)
        # an unmixed disc inside the tolerance keeps the corruption free of per-mask randomness
        pure = [r for r in disc_radii(hi) if abs(f(r) - target_iou) <= tolerance]
        if pure:
            r = min(pure, key=lambda x: abs(f(x) - target_iou))
        else:
            r = _bisect(f, 0.0, hi, target_iou, tolerance)
        spec = CorruptionSpec(kind, radius=float(r), seed=seed)
        level = CorruptionLevel(target_iou, f(r), tolerance)
    if not level.ok:
        raise CalibrationError(
            f"{kind}: best achievable IoU {level.achieved_iou:.4f} misses target {target_iou} by more than {tolerance}")
    return spec, level


def write_corrupted(out_dir, ids, masks, spec, level):
    """Masks go to ``masks/<id>_a.png`` (same layout as generated datasets) plus ``corruption.json``."""
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    paths = []
    for pid, m in zip(ids, masks):
        rel = f"masks/{pid}_a.png"
        fileio.write_mask(out / rel, m)
        paths.append(rel)
    record = {"spec": dataclasses.asdict(spec), "level": dataclasses.asdict(level), "masks": paths}
    (out / "corruption.json").write_text(json.dumps(record, indent=1, sort_keys=True))
    return record
