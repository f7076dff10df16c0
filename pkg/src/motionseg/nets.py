"""Network roles, their forward contracts, and the checkpoint container.

Segmenters (teacher, proxy, student) and the flow generator are U-shaped
encoder/decoder nets; ``encoder_depth`` counts the 3x3 convolutions of the
encoder, spread over ``n_levels`` resolutions. Activations are SiLU so the
losses stay smooth in the parameters (finite-difference checks rely on it).
The discriminator is two nets: one global score and one k x k patch map.
"""

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ROLES = ("teacher_segmenter", "generator", "disc_global", "disc_patch", "proxy", "student")
PROB_EPS = 1e-6


class ShapeError(ValueError):
    pass


class ArchConfigError(ValueError):
    pass


@dataclass
class ArchSpec:
    role: str
    encoder_depth: int
    base_channels: int = 16
    input_channels: int = 3
    image_size: int = 64
    n_levels: int = 4
    noise_size: int = 0
    patch_size: int = 4

    @property
    def output_shape(self):
        s = self.image_size
        return {
            "teacher_segmenter": (1, s, s), "proxy": (1, s, s), "student": (1, s, s),
            "generator": (2, s, s), "disc_global": (1,), "disc_patch": (1, self.patch_size, self.patch_size),
        }[self.role]

    def validate(self):
        if self.role not in ROLES:
            raise ArchConfigError(f"unknown role {self.role!r}")
        if self.base_channels < 1 or self.input_channels < 1:
            raise ArchConfigError("channel counts must be positive")
        if self.role == "generator" and self.input_channels != 1 + self.noise_size:
            raise ArchConfigError(
                f"generator input channels must be 1 + noise_size = {1 + self.noise_size}, got {self.input_channels}")
        if self.noise_size < 0:
            raise ArchConfigError("noise_size must be >= 0")
        if self.role.startswith("disc"):
            down = self.image_size // self.patch_size
            if self.image_size % self.patch_size or down & (down - 1):
                raise ArchConfigError("image_size / patch_size must be a power of two")
            if self.encoder_depth < 1:
                raise ArchConfigError("discriminator needs at least one conv layer")
        else:
            if self.encoder_depth < self.n_levels:
                raise ArchConfigError(f"encoder_depth {self.encoder_depth} < n_levels {self.n_levels}")
            if self.image_size % (2 ** (self.n_levels - 1)):
                raise ArchConfigError("image_size must be divisible by 2**(n_levels-1)")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


def default_arch(role, image_size=64, base_channels=16, noise_size=32, patch_size=4, frame_channels=3):
    """Desk-scale defaults: teacher 5, proxy 6, student 10 encoder convs; 4x4 patch map."""
    if role == "teacher_segmenter":
        spec = ArchSpec(role, 5, base_channels, 2, image_size)
    elif role == "generator":
        spec = ArchSpec(role, 5, base_channels, 1 + noise_size, image_size, noise_size=noise_size)
    elif role == "proxy":
        spec = ArchSpec(role, 6, base_channels, frame_channels, image_size)
    elif role == "student":
        spec = ArchSpec(role, 10, base_channels, frame_channels, image_size)
    elif role in ("disc_global", "disc_patch"):
        depth = int(np.log2(image_size // patch_size)) + 1
        spec = ArchSpec(role, depth, base_channels, 2, image_size, patch_size=patch_size)
    else:
        raise ArchConfigError(f"unknown role {role!r}")
    return spec.validate()


def _level_depths(depth, levels):
    base, extra = divmod(depth, levels)
    return [base + (1 if i < extra else 0) for i in range(levels)]


def _conv_block(cin, cout, n):
    layers = []
    for _ in range(n):
        layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.SiLU()]
        cin = cout
    return nn.Sequential(*layers)


class UNet(nn.Module):
    def __init__(self, spec, out_channels, bilinear=False, head_extra=0):
        super().__init__()
        depths = _level_depths(spec.encoder_depth, spec.n_levels)
        chans = [spec.base_channels * 2 ** i for i in range(spec.n_levels)]
        self.down = nn.ModuleList()
        cin = spec.input_channels
        for c, n in zip(chans, depths):
            self.down.append(_conv_block(cin, c, n))
            cin = c
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for i in range(spec.n_levels - 1, 0, -1):
            if bilinear:
                self.up.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                                             nn.Conv2d(chans[i], chans[i - 1], 1)))
            else:
                self.up.append(nn.ConvTranspose2d(chans[i], chans[i - 1], 2, stride=2))
            self.merge.append(_conv_block(2 * chans[i - 1], chans[i - 1], 1))
        self.head = nn.Conv2d(chans[0] + head_extra, out_channels, 1)

    def forward(self, x, head_extra=None):
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.avg_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        for j, (up, merge) in enumerate(zip(self.up, self.merge)):
            x = merge(torch.cat([up(x), skips[-2 - j]], dim=1))
        if head_extra is not None:
            x = torch.cat([x, head_extra], dim=1)
        return self.head(x)


def squash(logits):
    """Sigmoid mapped into the open interval (PROB_EPS, 1 - PROB_EPS)."""
    return PROB_EPS + (1.0 - 2.0 * PROB_EPS) * torch.sigmoid(logits)


class Segmenter(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.net = UNet(spec, 1)

    def forward(self, x):
        return squash(self.net(x))


class Generator(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        # the mask also feeds the output head directly, so the flow depends on
        # it from the start however strongly the noise channels dominate the input
        self.net = UNet(spec, 2, bilinear=True, head_extra=1)

    def forward(self, mask, noise):
        """mask (N, 1, H, W), noise (N, noise_size) broadcast to constant channels."""
        x = mask
        if self.spec.noise_size:
            n, _, h, w = mask.shape
            planes = noise.view(n, -1, 1, 1).expand(n, self.spec.noise_size, h, w)
            x = torch.cat([mask, planes], dim=1)
        return self.net(x, head_extra=mask)


class Discriminator(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        n_down = int(np.log2(spec.image_size // spec.patch_size))
        layers = []
        cin = spec.input_channels
        for i in range(spec.encoder_depth):
            cout = spec.base_channels * 2 ** min(i, 3)
            stride = 2 if i < n_down else 1
            layers += [nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.SiLU()]
            cin = cout
        self.features = nn.Sequential(*layers)
        self.global_score = spec.role == "disc_global"
        self.head = nn.Linear(cin, 1) if self.global_score else nn.Conv2d(cin, 1, 1)

    def forward(self, flow):
        f = self.features(flow)
        if self.global_score:
            return squash(self.head(f.mean(dim=(2, 3)))).view(-1)
        return squash(self.head(f))[:, 0]


def _build(spec):
    if spec.role in ("teacher_segmenter", "proxy", "student"):
        return Segmenter(spec)
    if spec.role == "generator":
        return Generator(spec)
    return Discriminator(spec)


def init_params(spec, seed):
    """Build the network for ``spec`` with weights drawn from ``seed``."""
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        net = _build(spec)
    net.init_seed = int(seed)
    return net


def param_count(net):
    return sum(p.numel() for p in net.parameters())


def checksum(net):
    h = hashlib.sha256()
    for name, t in net.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()


# -- numpy-facing forwards --------------------------------------------------

def to_nchw(x):
    """(H, W, C) or (N, H, W, C) numpy -> (N, C, H, W) float32 tensor."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


def _check_input(spec, x):
    if x.shape[1:] != (spec.input_channels, spec.image_size, spec.image_size):
        raise ShapeError(f"{spec.role} expects (C, H, W) = "
                         f"{(spec.input_channels, spec.image_size, spec.image_size)}, got {tuple(x.shape[1:])}")


@torch.no_grad()
def segment(net, x, batch_size=64):
    """Probability masks for frames or flows given as (H, W, C) or (N, H, W, C)."""
    single = np.asarray(x).ndim == 3
    t = to_nchw(x)
    _check_input(net.spec, t)
    was_training = net.training
    net.eval()
    out = torch.cat([net(t[i:i + batch_size]) for i in range(0, len(t), batch_size)])[:, 0].numpy()
    net.train(was_training)
    return out[0] if single else out


@torch.no_grad()
def generate(net, mask, noise):
    """Synthetic flow (N, H, W, 2) for masks (H, W)/(N, H, W) and noise (k,)/(N, k)."""
    m = np.asarray(mask, dtype=np.float32)
    single = m.ndim == 2
    if single:
        m = m[None]
    n = np.asarray(noise, dtype=np.float32).reshape(len(m), -1)
    spec = net.spec
    if m.shape[1:] != (spec.image_size, spec.image_size) or n.shape[1] != spec.noise_size:
        raise ShapeError(f"generator expects {spec.image_size}x{spec.image_size} masks and "
                         f"{spec.noise_size} noise values, got {m.shape[1:]} and {n.shape[1]}")
    t = torch.from_numpy(m[:, None])
    out = net(t, torch.from_numpy(n)).numpy().transpose(0, 2, 3, 1)
    return out[0] if single else out


@torch.no_grad()
def discriminate(global_net, patch_net, flow):
    """Global scores (N,) and patch maps (N, k, k) for flows (H, W, 2)/(N, H, W, 2)."""
    single = np.asarray(flow).ndim == 3
    t = to_nchw(flow)
    _check_input(global_net.spec, t)
    _check_input(patch_net.spec, t)
    g = global_net(t).numpy()
    p = patch_net(t).numpy()
    return (g[0], p[0]) if single else (g, p)


def combined_score(global_scores, patch_maps):
    """Per-sample mean of the global score and the mean patch score."""
    return 0.5 * (global_scores + patch_maps.flatten(1).mean(dim=1))


# -- checkpoint container ---------------------------------------------------
#
#   b"MSEGCKPT" | u32 version | u32 header_len | header JSON (utf-8)
#   | u32 n_records | n_records x (u16 name_len | name | u8 ndim | ndim x u32 | f32 data)
#
# All integers and floats little-endian.

_MAGIC = b"MSEGCKPT"
_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, net, extra=None):
    header = json.dumps({"arch": net.spec.to_dict(), "seed": getattr(net, "init_seed", None),
                         "extra": extra or {}}, sort_keys=True).encode()
    state = net.state_dict()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(state)))
        for name, t in state.items():
            arr = t.detach().cpu().numpy().astype("<f4")
            bname = name.encode()
            f.write(struct.pack("<H", len(bname)))
            f.write(bname)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path):
    """Return ``(net, extra)``."""
    data = open(path, "rb").read()
    if data[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 16
    header = json.loads(data[off:off + hlen])
    off += hlen
    spec = ArchSpec(**header["arch"])
    net = init_params(spec, header["seed"] or 0)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        state[name] = torch.from_numpy(arr.astype(np.float32))
    try:
        net.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: parameters do not match arch: {e}") from e
    return net, header["extra"]
