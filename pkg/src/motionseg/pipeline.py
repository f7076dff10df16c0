"""Training orchestration: teacher GAN, pseudo-labels, proxy, student, and the two run modes.

Every random quantity comes from ``default_rng([seed, stage, ...])`` keyed by
epoch/step and sample index, so a run is a pure function of the config and
the data. The proxy and student only ever see single frames.
"""

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import nets
from .augment import (AugmentSpec, augm_spatial, draw_augmentation, normalize_flow,
                      normalize_flow_torch, rotate_flow_torch)
from .losses import cycle_loss, disc_adv_loss, gen_adv_loss, proxy_loss, student_loss
from .maskmetrics import binarize, effective_iou, iou, local_iou

MODES = ("2step", "3step")
_STAGE = {"init": 0, "teacher": 1, "proxy": 2, "student": 3}

TRACE_COLUMNS = ("epoch", "stage", "loss", "loss_cycle", "loss_adv_g", "loss_adv_d", "d_real", "d_fake",
                 "iou_gt", "label_iou", "eff_fraction", "eff_iou")


class TrainConfigError(ValueError):
    pass


class TrainingDivergenceError(RuntimeError):
    def __init__(self, stage, step, value):
        super().__init__(f"{stage}: non-finite loss {value} at step {step}")
        self.stage = stage
        self.step = step


class DatasetRejectionError(RuntimeError):
    pass


class IngestionError(ValueError):
    pass


@dataclass
class TrainConfig:
    teacher_epochs: int = 10
    proxy_epochs: int = 10
    student_epochs: int = 10
    batch_size: int = 8
    lr_gan: float = 1e-3
    lr_teacher: float = 2e-3
    lr_proxy: float = 5e-4
    lr_student: float = 5e-4
    betas_gan: tuple = (0.5, 0.9)
    betas: tuple = (0.9, 0.999)
    # proxy/student rates halve every `lr_decay_every` epochs from `lr_decay_start` on
    lr_decay_start: int = 20
    lr_decay_every: int = 5
    eps_t: float = 0.5
    eps_p: float = 0.5
    eps_iou: float = 0.5
    window: int = None  # None -> image_size // 4
    alpha: float = 0.8
    noise_size: int = 32
    flow_rotation: bool = True
    student_iou_prefactor: bool = True
    base_channels: int = 16
    patch_size: int = 4
    p_flip_lr: float = 0.5
    p_flip_ud: float = 0.5
    min_crop_fraction: float = 224 / 256
    teacher_steps_per_epoch: int = None  # None -> ceil(n_pairs / batch_size)
    mode: str = "3step"
    seed: int = 0

    def validate(self):
        for name in ("lr_gan", "lr_teacher", "lr_proxy", "lr_student"):
            if not getattr(self, name) > 0:
                raise TrainConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("eps_t", "eps_p", "eps_iou", "alpha"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise TrainConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        for b in (*self.betas, *self.betas_gan):
            if not 0.0 <= b < 1.0:
                raise TrainConfigError(f"Adam coefficients must lie in [0, 1), got {b}")
        if self.mode not in MODES:
            raise TrainConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("teacher_epochs", "proxy_epochs", "student_epochs"):
            if getattr(self, name) < 0:
                raise TrainConfigError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.lr_decay_every < 1 or self.noise_size < 0:
            raise TrainConfigError("batch_size and lr_decay_every must be >= 1, noise_size >= 0")
        if self.window is not None and self.window < 1:
            raise TrainConfigError(f"window must be >= 1, got {self.window}")
        self.augment_spec().validate()
        return self

    def augment_spec(self):
        return AugmentSpec(self.p_flip_lr, self.p_flip_ud, self.min_crop_fraction)

    def window_for(self, image_size):
        return self.window or max(1, image_size // 4)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["betas"], d["betas_gan"] = list(self.betas), list(self.betas_gan)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainConfigError(f"unknown training fields: {sorted(unknown)}")
        d = dict(d)
        for k in ("betas", "betas_gan"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d).validate()


@dataclass
class PseudoLabel:
    y_t: np.ndarray  # (H, W) bool
    source_id: str


def _rng(seed, stage, *keys):
    return np.random.default_rng([int(seed), _STAGE[stage], *[int(k) for k in keys]])


def lr_factor(cfg, epoch):
    if epoch < cfg.lr_decay_start:
        return 1.0
    return 0.5 ** ((epoch - cfg.lr_decay_start) // cfg.lr_decay_every + 1)


class TrainState:
    """All networks and optimizers of a run plus per-stage progress counters."""

    def __init__(self, cfg, image_size, frame_channels=3):
        cfg.validate()
        self.cfg = cfg
        self.image_size = image_size
        arch = dict(image_size=image_size, base_channels=cfg.base_channels, noise_size=cfg.noise_size,
                    patch_size=cfg.patch_size, frame_channels=frame_channels)
        seeds = np.random.SeedSequence([int(cfg.seed), _STAGE["init"]]).generate_state(len(nets.ROLES))
        self.nets = {role: nets.init_params(nets.default_arch(role, **arch), int(s))
                     for role, s in zip(nets.ROLES, seeds)}
        adam = torch.optim.Adam
        n = self.nets
        self.opt = {
            "generator": adam(n["generator"].parameters(), lr=cfg.lr_gan, betas=tuple(cfg.betas_gan)),
            "disc": adam(list(n["disc_global"].parameters()) + list(n["disc_patch"].parameters()),
                         lr=cfg.lr_gan, betas=tuple(cfg.betas_gan)),
            "teacher_segmenter": adam(n["teacher_segmenter"].parameters(), lr=cfg.lr_teacher,
                                      betas=tuple(cfg.betas)),
            "proxy": adam(n["proxy"].parameters(), lr=cfg.lr_proxy, betas=tuple(cfg.betas)),
            "student": adam(n["student"].parameters(), lr=cfg.lr_student, betas=tuple(cfg.betas)),
        }
        self.steps = {"teacher": 0, "proxy": 0, "student": 0}
        self.epochs = {"teacher": 0, "proxy": 0, "student": 0}

    @property
    def teacher(self):
        return self.nets["teacher_segmenter"]

    @property
    def proxy(self):
        return self.nets["proxy"]

    @property
    def student(self):
        return self.nets["student"]

    def checksums(self):
        return {role: nets.checksum(net) for role, net in self.nets.items()}


def _finite(loss, stage, step):
    v = float(loss.detach())
    if not math.isfinite(v):
        raise TrainingDivergenceError(stage, step, v)


def _flows_tensor(flows):
    return torch.from_numpy(np.ascontiguousarray(np.asarray(flows, dtype=np.float32).transpose(0, 3, 1, 2)))


def _masks_tensor(masks):
    return torch.from_numpy(np.asarray(masks, dtype=np.float32)[:, None])


def _flow_view(flows, rng, cfg):
    """Rotate (independent angle per sample) and normalize a (N, 2, H, W) batch."""
    if cfg.flow_rotation:
        theta = torch.from_numpy(rng.uniform(-np.pi, np.pi, size=len(flows)).astype(np.float32))
        flows = rotate_flow_torch(flows, theta)
    return normalize_flow_torch(flows)


# -- step I -----------------------------------------------------------------

def train_teacher_step(state, flows, priors):
    """One adversarial iteration on real flows (N, H, W, 2) and shape priors (N, H, W).

    Generator and teacher segmenter share one backward pass of
    ``gen_adv + cycle``; the discriminator then steps on detached fakes.
    Returns the scalar loss terms.
    """
    cfg = state.cfg
    step = state.steps["teacher"]
    rng = _rng(cfg.seed, "teacher", step)
    spec = cfg.augment_spec()
    shape = flows.shape[1:3]
    real = np.stack([augm_spatial(f, draw_augmentation(spec, shape, rng), "flow") for f in flows])
    masks = np.stack([augm_spatial(m, draw_augmentation(spec, shape, rng), "mask") for m in priors])
    noise = torch.from_numpy(rng.standard_normal((len(masks), cfg.noise_size)).astype(np.float32))

    n = state.nets
    G, S, Dg, Dp = n["generator"], n["teacher_segmenter"], n["disc_global"], n["disc_patch"]
    m = _masks_tensor(masks)
    fake = _flow_view(G(m, noise), rng, cfg)
    real = _flow_view(_flows_tensor(real), rng, cfg)

    def score(x):
        return nets.combined_score(Dg(x), Dp(x))

    l_cyc = cycle_loss(m, S(fake))
    l_adv = gen_adv_loss(score(fake))
    loss_g = l_adv + l_cyc
    _finite(loss_g, "teacher", step)
    state.opt["generator"].zero_grad()
    state.opt["teacher_segmenter"].zero_grad()
    loss_g.backward()
    state.opt["generator"].step()
    state.opt["teacher_segmenter"].step()

    d_fake = score(fake.detach())
    d_real = score(real)
    loss_d = disc_adv_loss(d_fake, d_real)
    _finite(loss_d, "teacher", step)
    state.opt["disc"].zero_grad()
    loss_d.backward()
    state.opt["disc"].step()

    state.steps["teacher"] = step + 1
    vals = {"loss": loss_g, "loss_cycle": l_cyc, "loss_adv_g": l_adv, "loss_adv_d": loss_d,
            "d_real": d_real.mean(), "d_fake": d_fake.mean()}
    return {k: float(v.detach()) for k, v in vals.items()}


def train_teacher_epoch(state, flows, priors):
    """One pass over the real flows; priors are sampled (seeded) alongside."""
    cfg = state.cfg
    if flows is None:
        raise IngestionError("teacher training needs optical flows")
    e = state.epochs["teacher"]
    rng = _rng(cfg.seed, "teacher", 10 ** 6, e)
    steps = cfg.teacher_steps_per_epoch or math.ceil(len(flows) / cfg.batch_size)
    order = rng.permutation(len(flows))
    rows = []
    for k in range(steps):
        idx = np.resize(order, (k + 1) * cfg.batch_size)[k * cfg.batch_size:]
        pidx = rng.integers(0, len(priors), size=len(idx))
        rows.append(train_teacher_step(state, flows[idx], priors[pidx]))
    state.epochs["teacher"] = e + 1
    return {key: float(np.mean([r[key] for r in rows])) for key in rows[0]}


def teacher_probabilities(teacher, flows):
    return nets.segment(teacher, np.stack([normalize_flow(f) for f in flows]))


def make_pseudo_labels(teacher, dataset, eps_t=0.5):
    """Binarized teacher segmentations of the (normalized, unrotated) dataset flows."""
    if dataset.flows is None:
        raise IngestionError("dataset has no optical flows to derive pseudo-labels from")
    probs = teacher_probabilities(teacher, dataset.flows)
    ids = dataset.ids or [str(i) for i in range(len(dataset))]
    return [PseudoLabel(binarize(p, eps_t), pid) for p, pid in zip(probs, ids)]


def label_stack(labels):
    return np.stack([lab.y_t if isinstance(lab, PseudoLabel) else np.asarray(lab, dtype=bool) for lab in labels])


# -- steps II and III -------------------------------------------------------

def _set_lr(opt, base, factor):
    for g in opt.param_groups:
        g["lr"] = base * factor


def _augmented_batch(cfg, stage, epoch, idx, frames, labels, gts=None):
    spec = cfg.augment_spec()
    shape = frames.shape[1:3]
    xs, ys, gs = [], [], []
    for i in idx:
        d = draw_augmentation(spec, shape, _rng(cfg.seed, stage, epoch, i))
        xs.append(augm_spatial(frames[i], d, "image"))
        ys.append(augm_spatial(labels[i], d, "mask"))
        if gts is not None:
            gs.append(augm_spatial(gts[i], d, "mask"))
    return np.stack(xs), np.stack(ys), (np.stack(gs) if gts is not None else None)


def _check_aligned(frames, labels):
    if len(frames) != len(labels):
        raise IngestionError(f"{len(frames)} frames but {len(labels)} labels")
    if frames.shape[1:3] != labels.shape[1:]:
        raise IngestionError(f"label resolution {labels.shape[1:]} != frame resolution {frames.shape[1:3]}")


def train_proxy(state, frames, labels, epochs=None):
    """Fit the proxy to (pseudo-)labels; returns one summary dict per epoch."""
    cfg = state.cfg
    labels = label_stack(labels)
    _check_aligned(frames, labels)
    net, opt = state.proxy, state.opt["proxy"]
    out = []
    for _ in range(cfg.proxy_epochs if epochs is None else epochs):
        e = state.epochs["proxy"]
        _set_lr(opt, cfg.lr_proxy, lr_factor(cfg, e))
        order = _rng(cfg.seed, "proxy", 10 ** 6, e).permutation(len(frames))
        losses = []
        for k in range(0, len(order), cfg.batch_size):
            idx = order[k:k + cfg.batch_size]
            x, y, _ = _augmented_batch(cfg, "proxy", e, idx, frames, labels)
            loss = proxy_loss(net(nets.to_nchw(x)), _masks_tensor(y), cfg.alpha)
            _finite(loss, "proxy", state.steps["proxy"])
            opt.zero_grad()
            loss.backward()
            opt.step()
            state.steps["proxy"] += 1
            losses.append(float(loss.detach()))
        state.epochs["proxy"] = e + 1
        out.append({"loss": float(np.mean(losses))})
    return out


def selection_masks(proxy_probs, labels, window, eps_p=0.5, eps_iou=0.5):
    """Per-sample binarized local IoU between the binarized proxy output and the label."""
    return np.stack([binarize(local_iou(binarize(p, eps_p), y, window, window), eps_iou)
                     for p, y in zip(proxy_probs, labels)])


def train_student(state, frames, labels, epochs=None, gts=None):
    """Fit the student on the regions where the proxy agrees with the label.

    ``gts`` (optional) enables the effective-IoU trace. Samples with an empty
    selection are skipped; an epoch in which every sample is empty raises
    :class:`DatasetRejectionError`.
    """
    cfg = state.cfg
    labels = label_stack(labels)
    _check_aligned(frames, labels)
    w = cfg.window_for(frames.shape[1])
    net, opt, proxy = state.student, state.opt["student"], state.proxy
    out = []
    for _ in range(cfg.student_epochs if epochs is None else epochs):
        e = state.epochs["student"]
        _set_lr(opt, cfg.lr_student, lr_factor(cfg, e))
        order = _rng(cfg.seed, "student", 10 ** 6, e).permutation(len(frames))
        losses, n_sel, n_pix, eff = [], 0, 0, []
        for k in range(0, len(order), cfg.batch_size):
            idx = order[k:k + cfg.batch_size]
            x, y, g = _augmented_batch(cfg, "student", e, idx, frames, labels, gts)
            xt = nets.to_nchw(x)
            with torch.no_grad():
                p = proxy(xt)[:, 0].numpy()
            sel = selection_masks(p, y, w, cfg.eps_p, cfg.eps_iou)
            n_pix += sel.size
            keep = np.flatnonzero(sel.reshape(len(sel), -1).any(axis=1))
            if len(keep) == 0:
                continue
            n_sel += int(sel.sum())
            if g is not None:
                eff += [effective_iou(g[i], y[i], sel[i]) for i in keep]
            loss = student_loss(net(xt[keep]), _masks_tensor(y[keep]), _masks_tensor(sel[keep]),
                                cfg.alpha, iou_prefactor=cfg.student_iou_prefactor)
            _finite(loss, "student", state.steps["student"])
            opt.zero_grad()
            loss.backward()
            opt.step()
            state.steps["student"] += 1
            losses.append(float(loss.detach()))
        if not losses:
            raise DatasetRejectionError(f"student epoch {e}: every sample has an empty selection")
        state.epochs["student"] = e + 1
        out.append({"loss": float(np.mean(losses)), "eff_fraction": n_sel / n_pix,
                    "eff_iou": float(np.mean(eff)) if eff else None})
    return out


# -- evaluation helpers -----------------------------------------------------

def predict_masks(net, frames, eps=0.5):
    return binarize(nets.segment(net, frames), eps)


def mean_iou(preds, gts):
    return float(np.mean([iou(p, g) for p, g in zip(preds, gts)]))


# -- orchestration ----------------------------------------------------------

@dataclass
class TrainResult:
    state: TrainState
    history: list
    report: dict
    pseudo_labels: list = field(default=None, repr=False)


def _row(epoch, stage, **vals):
    row = {c: "" for c in TRACE_COLUMNS}
    row.update(epoch=epoch, stage=stage)
    for k, v in vals.items():
        if v is not None:
            row[k] = v
    return row


def _monitor_iou(net, data):
    if data is None or data.masks is None:
        return None
    return mean_iou(predict_masks(net, data.frames), data.masks)


def _teacher_iou(teacher, data, eps_t):
    if data is None or data.masks is None or data.flows is None:
        return None
    return mean_iou(binarize(teacher_probabilities(teacher, data.flows), eps_t), data.masks)


def fit_on_labels(state, train, labels, test=None, history=None, proxy_epochs=None, student_epochs=None):
    """Steps II and III on fixed labels (pseudo-labels or substituted corrupted labels)."""
    cfg = state.cfg
    history = [] if history is None else history
    labels = label_stack(labels)
    label_iou = mean_iou(labels, train.masks) if train.masks is not None else None
    for _ in range(cfg.proxy_epochs if proxy_epochs is None else proxy_epochs):
        r = train_proxy(state, train.frames, labels, epochs=1)[0]
        history.append(_row(state.epochs["proxy"], "proxy", loss=r["loss"], label_iou=label_iou,
                            iou_gt=_monitor_iou(state.proxy, test)))
    fit_student(state, train, labels, test, history, student_epochs)
    return history


def fit_student(state, train, labels, test=None, history=None, epochs=None):
    history = [] if history is None else history
    labels = label_stack(labels)
    label_iou = mean_iou(labels, train.masks) if train.masks is not None else None
    for _ in range(state.cfg.student_epochs if epochs is None else epochs):
        r = train_student(state, train.frames, labels, epochs=1, gts=train.masks)[0]
        history.append(_row(state.epochs["student"], "student", loss=r["loss"], label_iou=label_iou,
                            eff_fraction=r["eff_fraction"], eff_iou=r["eff_iou"],
                            iou_gt=_monitor_iou(state.student, test)))
    return history


def _teacher_epoch_row(state, train, priors, test):
    cfg = state.cfg
    r = train_teacher_epoch(state, train.flows, priors)
    labels = make_pseudo_labels(state.teacher, train, cfg.eps_t)
    label_iou = mean_iou(label_stack(labels), train.masks) if train.masks is not None else None
    return labels, _row(state.epochs["teacher"], "teacher", label_iou=label_iou,
                        iou_gt=_teacher_iou(state.teacher, test, cfg.eps_t), **r)


def run_training(cfg, train, priors, test=None, out_dir=None):
    """Run all stages in ``cfg.mode`` and return the trained state, per-epoch trace and report.

    ``test`` (optional, with GT) is the held-out monitor set. With
    ``out_dir`` the trace, report and checkpoints are written there.
    """
    cfg.validate()
    if train.flows is None:
        raise IngestionError("training set has no optical flows")
    state = TrainState(cfg, train.frames.shape[1], train.frames.shape[3])
    history = []
    labels = None
    if cfg.mode == "3step":
        for _ in range(cfg.teacher_epochs):
            labels, row = _teacher_epoch_row(state, train, priors, test)
            history.append(row)
        if labels is None:
            labels = make_pseudo_labels(state.teacher, train, cfg.eps_t)
        fit_on_labels(state, train, labels, test, history)
    else:
        for _ in range(cfg.teacher_epochs):
            labels, row = _teacher_epoch_row(state, train, priors, test)
            history.append(row)
            fit_on_labels(state, train, labels, test, history, proxy_epochs=1, student_epochs=0)
        if labels is None:
            labels = make_pseudo_labels(state.teacher, train, cfg.eps_t)
        extra = max(0, cfg.proxy_epochs - cfg.teacher_epochs)
        if extra:
            fit_on_labels(state, train, labels, test, history, proxy_epochs=extra, student_epochs=0)
        fit_student(state, train, labels, test, history)

    report = build_report(state, train, labels, test)
    result = TrainResult(state, history, report, labels)
    if out_dir is not None:
        write_run(result, out_dir)
    return result


def build_report(state, train, labels, test=None):
    cfg = state.cfg
    lab = label_stack(labels)
    rep = {"mode": cfg.mode, "seed": cfg.seed, "n_train": len(train),
           "steps": dict(state.steps), "epochs": dict(state.epochs), "checksums": state.checksums()}
    if train.masks is not None:
        rep["pseudo_label_iou"] = mean_iou(lab, train.masks)
    if test is not None and test.masks is not None:
        rep["n_test"] = len(test)
        rep["teacher_test_iou"] = _teacher_iou(state.teacher, test, cfg.eps_t)
        rep["proxy_test_iou"] = _monitor_iou(state.proxy, test)
        rep["student_test_iou"] = _monitor_iou(state.student, test)
    return rep


def write_trace(path, history):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def write_run(result, out_dir):
    """metrics.csv, report.json and one checkpoint per network; returns the relative paths."""
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    write_trace(out / "metrics.csv", result.history)
    (out / "report.json").write_text(json.dumps(result.report, indent=1, sort_keys=True))
    paths = ["metrics.csv", "report.json"]
    for role, net in result.state.nets.items():
        rel = f"checkpoints/{role}.ckpt"
        nets.save_checkpoint(out / rel, net, {"mode": result.state.cfg.mode, "epochs": result.state.epochs})
        paths.append(rel)
    return paths
