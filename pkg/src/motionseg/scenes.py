"""Synthetic tool-like video pairs with exact masks and analytic optical flow.

Every pair is a pure function of ``(cfg.seed, index)``: objects are
elongated capsules with an elliptical head, entering the view from an image
border, rendered opaquely over a smooth reddish background texture. Each
object undergoes a rigid motion (rotation about its border entry point plus
a translation) between the two frames and the background translates as a
whole, so the flow at any pixel is known in closed form from its owner in
the first frame. Occlusions are ignored.
"""

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import fileio


class ConfigError(ValueError):
    """Invalid configuration values."""


class DatasetError(RuntimeError):
    """Failure while writing or ingesting a dataset on disk."""


@dataclass
class SceneConfig:
    image_size: int = 64
    n_objects: int = 2
    min_objects: int = 1
    p_still: float = 0.0
    fg_motion_range: tuple = (1.5, 3.0)
    max_rotation: float = 0.05
    bg_motion_magnitude: float = 0.5
    bg_fg_correlation: float = 0.0
    texture_scale: float = 6.0
    channels: int = 3
    noise_std: float = 0.01
    window: int = 16
    seed: int = 0

    def validate(self):
        s = self.image_size
        if not isinstance(s, (int, np.integer)) or s <= 0:
            raise ConfigError(f"image_size must be a positive integer, got {s!r}")
        if self.window <= 0 or s % self.window:
            raise ConfigError(f"image_size {s} not divisible by local-IoU window {self.window}")
        if not 1 <= self.min_objects <= self.n_objects <= 4:
            raise ConfigError("need 1 <= min_objects <= n_objects <= 4")
        for name in ("p_still", "bg_fg_correlation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.fg_motion_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad fg_motion_range {self.fg_motion_range}")
        if self.bg_motion_magnitude < 0 or self.max_rotation < 0:
            raise ConfigError("motion magnitudes must be non-negative")
        if self.texture_scale <= 0:
            raise ConfigError("texture_scale must be positive")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["fg_motion_range"] = list(self.fg_motion_range)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
        d = dict(d)
        if "fg_motion_range" in d:
            d["fg_motion_range"] = tuple(d["fg_motion_range"])
        return cls(**d).validate()


@dataclass
class ToolShape:
    """Capsule shaft from ``start`` to ``tip`` (x, y) plus an elliptical head at the tip."""
    start: tuple
    tip: tuple
    radius: float
    head_axes: tuple
    shade: float
    tint: tuple


@dataclass
class ObjectMotion:
    translation: tuple  # (dx, dy) pixels
    rotation: float     # radians, about pivot
    pivot: tuple        # (x, y)

    @property
    def still(self):
        return self.translation == (0.0, 0.0) and self.rotation == 0.0


@dataclass
class ScenePair:
    frame_t: np.ndarray      # (H, W, C) float32 in [0, 1]
    frame_t1: np.ndarray
    gt_mask: np.ndarray      # (H, W) bool
    flow: np.ndarray         # (H, W, 2) float32, (u, v)
    motions: list
    bg_translation: tuple
    owner: np.ndarray = field(repr=False, default=None)  # (H, W) int, -1 is background


def _rng(seed, index, stream=0):
    return np.random.default_rng([int(seed), int(index), stream])


def _sample_tools(cfg, rng):
    s = cfg.image_size
    k = int(rng.integers(cfg.min_objects, cfg.n_objects + 1))
    tools = []
    for _ in range(k):
        side = int(rng.integers(4))
        pos = rng.uniform(0.15, 0.85) * s
        # entry point on the border and inward normal
        entry, normal = [
            ((pos, -0.5), (0.0, 1.0)),
            ((s - 0.5, pos), (-1.0, 0.0)),
            ((pos, s - 0.5), (0.0, -1.0)),
            ((-0.5, pos), (1.0, 0.0)),
        ][side]
        ang = np.arctan2(normal[1], normal[0]) + rng.uniform(-np.pi / 4, np.pi / 4)
        d = np.array([np.cos(ang), np.sin(ang)])
        length = rng.uniform(0.4, 0.75) * s
        radius = rng.uniform(0.035, 0.06) * s
        entry = np.asarray(entry)
        start = entry - d * 0.25 * s
        tip = entry + d * length
        tools.append(ToolShape(
            start=tuple(start), tip=tuple(tip), radius=float(radius),
            head_axes=(float(radius * rng.uniform(1.6, 2.2)), float(radius * rng.uniform(1.2, 1.6))),
            shade=float(rng.uniform(0.6, 0.9)),
            tint=tuple(rng.uniform(-0.04, 0.04, size=3)),
        ))
    return tools


def _tool_fields(tool, xs, ys):
    """Return (inside, across) for pixel-center coordinates in the tool's frame."""
    p0 = np.asarray(tool.start)
    p1 = np.asarray(tool.tip)
    d = p1 - p0
    ln = np.hypot(*d)
    d = d / ln
    rx, ry = xs - p0[0], ys - p0[1]
    along = rx * d[0] + ry * d[1]
    across = -rx * d[1] + ry * d[0]
    t = np.clip(along, 0.0, ln)
    dist = np.hypot(along - t, across)
    shaft = dist <= tool.radius
    a, b = tool.head_axes
    head = ((along - ln) / a) ** 2 + (across / b) ** 2 <= 1.0
    return shaft | head, across / tool.radius, head & ~shaft


def _inverse_motion(xs, ys, m):
    """Map frame t+1 coordinates back to frame t under a rigid motion."""
    cx, cy = m.pivot
    qx = xs - cx - m.translation[0]
    qy = ys - cy - m.translation[1]
    c, s = np.cos(-m.rotation), np.sin(-m.rotation)
    return c * qx - s * qy + cx, s * qx + c * qy + cy


def _forward_flow(xs, ys, m):
    cx, cy = m.pivot
    c, s = np.cos(m.rotation), np.sin(m.rotation)
    rx, ry = xs - cx, ys - cy
    return (c * rx - s * ry + cx + m.translation[0] - xs,
            s * rx + c * ry + cy + m.translation[1] - ys)


def _texture(cfg, rng, pad):
    n = cfg.image_size + 2 * pad
    fields = []
    for sigma in (cfg.texture_scale, cfg.texture_scale / 3.0):
        f = ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma, mode="wrap")
        f = f / (np.abs(f).max() + 1e-12)
        fields.append(f)
    base = np.array([0.72, 0.32, 0.28]) + rng.uniform(-0.06, 0.06, size=3)
    tex = base[None, None, :] + 0.12 * fields[0][..., None] + 0.05 * fields[1][..., None] * np.array([1.0, 0.6, 0.6])
    return np.clip(tex, 0.0, 1.0)


def _sample_bg(tex, pad, xs, ys):
    coords = [ys + pad, xs + pad]
    return np.stack([ndimage.map_coordinates(tex[..., c], coords, order=1, mode="nearest")
                     for c in range(tex.shape[2])], axis=-1)


def _paint(img, tool, inside, across, head):
    shade = tool.shade * (1.0 - 0.3 * np.clip(across, -1, 1) ** 2)
    shade = np.where(head, tool.shade * 0.55, shade)
    col = shade[..., None] + np.asarray(tool.tint)[None, None, :]
    img[inside] = np.clip(col[inside], 0.0, 1.0)


def sample_tools(cfg, index, stream=1):
    """Draw object geometry only (used for shape priors)."""
    return _sample_tools(cfg, _rng(cfg.seed, index, stream))


def render_mask(cfg, tools):
    s = cfg.image_size
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    mask = np.zeros((s, s), bool)
    for tool in tools:
        mask |= _tool_fields(tool, xs, ys)[0]
    return mask


def gen_shape_prior(cfg, index):
    """A tool-shaped binary mask drawn from a stream disjoint from gen_scene_pair."""
    cfg.validate()
    return render_mask(cfg, sample_tools(cfg, index, stream=1))


def gen_scene_pair(cfg, index):
    """Generate the ``index``-th frame pair of the synthetic video defined by ``cfg``."""
    cfg.validate()
    if index < 0:
        raise ConfigError(f"index must be >= 0, got {index}")
    rng = _rng(cfg.seed, index)
    s = cfg.image_size
    tools = _sample_tools(cfg, rng)

    motions = []
    for tool in tools:
        ang = rng.uniform(-np.pi, np.pi)
        mag = rng.uniform(*cfg.fg_motion_range)
        rot = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
        if rng.random() < cfg.p_still:
            motions.append(ObjectMotion((0.0, 0.0), 0.0, tool.start))
        else:
            motions.append(ObjectMotion((float(mag * np.cos(ang)), float(mag * np.sin(ang))),
                                        float(rot), tool.start))

    bg_ang = rng.uniform(-np.pi, np.pi)
    bg_rand = cfg.bg_motion_magnitude * np.array([np.cos(bg_ang), np.sin(bg_ang)])
    mean_fg = np.mean([m.translation for m in motions], axis=0)
    nrm = np.hypot(*mean_fg)
    coupled = mean_fg / nrm * cfg.bg_motion_magnitude if nrm > 0 else np.zeros(2)
    c = cfg.bg_fg_correlation
    bg = (1.0 - c) * bg_rand + c * coupled
    bg_t = (float(bg[0]), float(bg[1]))

    pad = int(np.ceil(cfg.bg_motion_magnitude)) + 2
    tex = _texture(cfg, rng, pad)
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)

    frame_t = _sample_bg(tex, pad, xs, ys)
    frame_t1 = _sample_bg(tex, pad, xs - bg_t[0], ys - bg_t[1])
    owner = np.full((s, s), -1, dtype=np.int64)
    flow = np.empty((s, s, 2))
    flow[..., 0] = bg_t[0]
    flow[..., 1] = bg_t[1]

    for k, (tool, m) in enumerate(zip(tools, motions)):
        inside, across, head = _tool_fields(tool, xs, ys)
        _paint(frame_t, tool, inside, across, head)
        owner[inside] = k
        u, v = _forward_flow(xs, ys, m)
        flow[inside, 0] = u[inside]
        flow[inside, 1] = v[inside]
        bx, by = _inverse_motion(xs, ys, m)
        inside1, across1, head1 = _tool_fields(tool, bx, by)
        _paint(frame_t1, tool, inside1, across1, head1)

    if cfg.noise_std > 0:
        frame_t = frame_t + rng.normal(0.0, cfg.noise_std, frame_t.shape)
        frame_t1 = frame_t1 + rng.normal(0.0, cfg.noise_std, frame_t1.shape)
    frame_t = np.clip(frame_t, 0.0, 1.0)
    frame_t1 = np.clip(frame_t1, 0.0, 1.0)
    if cfg.channels == 1:
        w = np.array([0.299, 0.587, 0.114])
        frame_t = frame_t @ w
        frame_t1 = frame_t1 @ w
        frame_t, frame_t1 = frame_t[..., None], frame_t1[..., None]

    return ScenePair(
        frame_t=frame_t.astype(np.float32),
        frame_t1=frame_t1.astype(np.float32),
        gt_mask=owner >= 0,
        flow=flow.astype(np.float32),
        motions=motions,
        bg_translation=bg_t,
        owner=owner,
    )


@dataclass
class SceneDataset:
    """In-memory stack of pairs; any of masks/flows may be None."""
    frames: np.ndarray        # (N, H, W, C)
    frames_next: np.ndarray
    masks: np.ndarray = None  # (N, H, W) bool
    flows: np.ndarray = None  # (N, H, W, 2)
    ids: list = None

    def __len__(self):
        return len(self.frames)

    def subset(self, idx):
        idx = np.asarray(idx)
        return SceneDataset(
            self.frames[idx], self.frames_next[idx],
            None if self.masks is None else self.masks[idx],
            None if self.flows is None else self.flows[idx],
            None if self.ids is None else [self.ids[i] for i in idx],
        )


def make_dataset(cfg, n_pairs, start=0):
    """Generate ``n_pairs`` pairs with indices ``start .. start+n_pairs-1`` into memory."""
    pairs = [gen_scene_pair(cfg, start + i) for i in range(n_pairs)]
    return SceneDataset(
        frames=np.stack([p.frame_t for p in pairs]),
        frames_next=np.stack([p.frame_t1 for p in pairs]),
        masks=np.stack([p.gt_mask for p in pairs]),
        flows=np.stack([p.flow for p in pairs]),
        ids=[f"{start + i:06d}" for i in range(n_pairs)],
    )


def make_priors(cfg, n, start=0):
    return np.stack([gen_shape_prior(cfg, start + i) for i in range(n)])


# -- on-disk datasets -------------------------------------------------------

@dataclass
class PairItem:
    id: str
    frame_t: str
    frame_t1: str
    mask: str = None
    flow: str = None


@dataclass
class DatasetManifest:
    root: Path
    items: list
    config: dict = None
    meta: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "schema_version": 1,
            "config": self.config,
            "items": [dataclasses.asdict(it) for it in self.items],
            "meta": self.meta,
        }

    def load(self, with_masks=True, with_flows=True):
        """Read all referenced files into a SceneDataset."""
        root = Path(self.root)
        frames = np.stack([_as_hwc(fileio.read_image(root / it.frame_t)) for it in self.items])
        nxt = np.stack([_as_hwc(fileio.read_image(root / it.frame_t1)) for it in self.items])
        masks = flows = None
        if with_masks and all(it.mask for it in self.items):
            masks = np.stack([fileio.read_mask(root / it.mask) for it in self.items])
        if with_flows and all(it.flow for it in self.items):
            flows = np.stack([fileio.read_flo(root / it.flow) for it in self.items])
        return SceneDataset(frames, nxt, masks, flows, [it.id for it in self.items])


def _as_hwc(img):
    return img[..., None] if img.ndim == 2 else img


def _motion_record(pair):
    return {
        "objects": [{"translation": list(m.translation), "rotation": m.rotation,
                     "pivot": [float(v) for v in m.pivot]} for m in pair.motions],
        "background": list(pair.bg_translation),
    }


def gen_dataset(cfg, n_pairs, out_dir, start=0):
    """Write pairs ``start .. start+n_pairs-1`` under ``out_dir`` and return the manifest.

    Layout: ``frames/<id>_a.png``, ``frames/<id>_b.png``, ``masks/<id>_a.png``,
    ``flows/<id>_a.flo`` and ``manifest.json``.
    """
    cfg.validate()
    if n_pairs < 1:
        raise ConfigError(f"n_pairs must be >= 1, got {n_pairs}")
    out = Path(out_dir)
    try:
        for sub in ("frames", "masks", "flows"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        items, motions = [], {}
        for i in range(start, start + n_pairs):
            pair = gen_scene_pair(cfg, i)
            pid = f"{i:06d}"
            it = PairItem(pid, f"frames/{pid}_a.png", f"frames/{pid}_b.png",
                          f"masks/{pid}_a.png", f"flows/{pid}_a.flo")
            fileio.write_image(out / it.frame_t, pair.frame_t)
            fileio.write_image(out / it.frame_t1, pair.frame_t1)
            fileio.write_mask(out / it.mask, pair.gt_mask)
            fileio.write_flo(out / it.flow, pair.flow)
            items.append(it)
            motions[pid] = _motion_record(pair)
        manifest = DatasetManifest(out, items, cfg.to_dict(), {"motions": motions})
        (out / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True))
    except OSError as e:
        raise DatasetError(f"failed writing dataset to {out}: {e}") from e
    return manifest


_FRAME_RE = re.compile(r"^(.+)\.png$")


def load_external_dataset(directory, with_masks=True, with_flows=True):
    """Scan a dataset directory laid out as written by :func:`gen_dataset`.

    Frames in ``frames/`` are sorted by name and paired consecutively; the
    mask and flow of a pair are looked up by the stem of its first frame.
    """
    root = Path(directory)
    fdir = root / "frames"
    if not fdir.is_dir():
        raise DatasetError(f"missing frames directory: {fdir}")
    names = sorted(p.name for p in fdir.iterdir() if _FRAME_RE.match(p.name))
    if not names:
        raise DatasetError(f"no frames found in {fdir}")
    if len(names) % 2:
        raise DatasetError(f"odd number of frames ({len(names)}) in {fdir}; cannot pair")
    items = []
    for a, b in zip(names[0::2], names[1::2]):
        stem = a[:-4]
        pid = stem[:-2] if stem.endswith("_a") else stem
        it = PairItem(pid, f"frames/{a}", f"frames/{b}")
        if with_masks:
            mp = root / "masks" / f"{stem}.png"
            if not mp.is_file():
                raise DatasetError(f"missing mask: {mp}")
            it.mask = f"masks/{stem}.png"
        if with_flows:
            fp = root / "flows" / f"{stem}.flo"
            if not fp.is_file():
                raise DatasetError(f"missing flow: {fp} (no learned flow estimator is bundled)")
            it.flow = f"flows/{stem}.flo"
        items.append(it)

    config, meta = None, {}
    mpath = root / "manifest.json"
    if mpath.is_file():
        doc = json.loads(mpath.read_text())
        config = doc.get("config")
        meta = doc.get("meta", {})
        listed = [it["id"] for it in doc.get("items", [])]
        if listed != [it.id for it in items]:
            raise DatasetError(f"{mpath}: listed items do not match files on disk")
    return DatasetManifest(root, items, config, meta)
