"""Evaluation reports, the local-IoU (window, threshold) sweep, the label-noise study and paired statistics."""

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import pipeline
from .corruption import KINDS, calibrate_corruption, corrupt_dataset
from .maskmetrics import ParameterError, binarize, iou, local_iou, pixel_accuracy, per_tool_ious

HIST_BINS = 10


class EvaluationError(ValueError):
    pass


class UndefinedEffectError(ValueError):
    pass


def tool_histogram(values, bins=HIST_BINS):
    """Counts of per-tool IoUs in ``bins`` equal bins over [0, 1] (1.0 falls in the last bin)."""
    counts, _ = np.histogram(np.asarray(values, dtype=float), bins=bins, range=(0.0, 1.0))
    return counts.astype(int).tolist()


@dataclass
class MetricsReport:
    per_sample_iou: list
    mean_iou: float
    pixel_accuracy: float
    tool_hist: list
    n_tools: int
    eff_fraction: float = None
    eff_iou: float = None

    def to_dict(self):
        return dataclasses.asdict(self)


def evaluate_masks(preds, gts):
    preds = [np.asarray(p, dtype=bool) for p in preds]
    gts = [np.asarray(g, dtype=bool) for g in gts]
    if len(preds) != len(gts):
        raise EvaluationError(f"{len(preds)} predictions but {len(gts)} ground-truth masks")
    if not gts:
        raise EvaluationError("nothing to evaluate")
    per = [float(iou(p, g)) for p, g in zip(preds, gts)]
    tools = [t for p, g in zip(preds, gts) for t in per_tool_ious(g, p)]
    return MetricsReport(
        per_sample_iou=per,
        mean_iou=float(np.mean(per)),
        pixel_accuracy=float(np.mean([pixel_accuracy(p, g) for p, g in zip(preds, gts)])),
        tool_hist=tool_histogram(tools),
        n_tools=len(tools),
    )


def evaluate(net, dataset, source="frames", eps=0.5):
    """Binarize the model's predictions at ``eps`` and score them against the dataset masks.

    ``source="flows"`` evaluates a flow segmenter (the teacher) on the
    normalized dataset flows instead of the frames.
    """
    if dataset.masks is None:
        raise EvaluationError("dataset has no ground-truth masks")
    if source == "frames":
        probs = pipeline.nets.segment(net, dataset.frames)
    elif source == "flows":
        if dataset.flows is None:
            raise EvaluationError("dataset has no flows")
        probs = pipeline.teacher_probabilities(net, dataset.flows)
    else:
        raise ValueError(f"source must be 'frames' or 'flows', got {source!r}")
    return evaluate_masks(binarize(probs, eps), dataset.masks)


# -- (w, eps) sweep ---------------------------------------------------------

def sweep_lociou(pseudo_labels, proxy_preds, gts, w_list, eps_list, eps_p=0.5):
    """Effective training fraction and mean effective IoU for every (window, threshold).

    ``proxy_preds`` may be probabilities (binarized at ``eps_p``) or masks.
    A pixel is selected when the local IoU of its tile is ``>= eps``, so
    thresholds above 1 select nothing. The mean effective IoU averages over
    the samples whose selection is nonempty (None when there are none).
    """
    if not len(w_list) or not len(eps_list):
        raise ParameterError("empty sweep grid")
    labels = pipeline.label_stack(pseudo_labels)
    preds = np.asarray(proxy_preds)
    preds = preds if preds.dtype == bool else binarize(preds, eps_p)
    gts = np.asarray(gts, dtype=bool)
    if not (len(labels) == len(preds) == len(gts)):
        raise ParameterError("pseudo-labels, proxy predictions and masks must be aligned")
    rows = []
    for w in w_list:
        maps = [local_iou(p, y, int(w), int(w)) for p, y in zip(preds, labels)]
        for eps in eps_list:
            n_sel, n_pix, eff = 0, 0, []
            for g, y, li in zip(gts, labels, maps):
                sel = li >= eps
                k = int(np.count_nonzero(sel))
                n_sel += k
                n_pix += sel.size
                if k:
                    union = np.count_nonzero((g | y) & sel)
                    eff.append(1.0 if union == 0 else np.count_nonzero(g & y & sel) / union)
            rows.append({"w": int(w), "eps": float(eps), "fraction": n_sel / n_pix,
                         "eff_iou": float(np.mean(eff)) if eff else None, "n_selected_samples": len(eff)})
    return rows


# -- noise study ------------------------------------------------------------

@dataclass
class NoiseStudy:
    cells: list = field(default_factory=list)       # one row per (kind, target, model)
    histograms: dict = field(default_factory=dict)  # "kind@target" -> per-tool IoU counts of the labels
    levels: dict = field(default_factory=dict)      # "kind@target" -> calibration record

    def cell(self, kind, target, model):
        for c in self.cells:
            if c["kind"] == kind and c["target"] == target and c["model"] == model:
                return c
        raise KeyError((kind, target, model))

    def to_dict(self):
        return dataclasses.asdict(self)


def noise_study(train, test, targets=(0.8, 0.6, 0.4, 0.2), kinds=KINDS, cfg=None, corruption_seed=0,
                histograms_only=False):
    """Calibrate each corruption, substitute it for the pseudo-labels, train proxy then student.

    Needs clean masks on ``train`` (to corrupt) and ``test`` (to score). With
    ``histograms_only`` no networks are trained.
    """
    if train.masks is None or test.masks is None:
        raise EvaluationError("noise study needs clean masks on both splits")
    cfg = cfg or pipeline.TrainConfig()
    gts = list(train.masks)
    out = NoiseStudy()
    for kind in kinds:
        for target in targets:
            spec, level = calibrate_corruption(gts, kind, target, seed=corruption_seed)
            noisy = np.stack(corrupt_dataset(gts, spec))
            key = f"{kind}@{target}"
            out.levels[key] = {"spec": dataclasses.asdict(spec), "achieved_iou": level.achieved_iou}
            out.histograms[key] = tool_histogram([t for g, n in zip(gts, noisy) for t in per_tool_ious(g, n)])
            if histograms_only:
                continue
            state = pipeline.TrainState(cfg, train.frames.shape[1], train.frames.shape[3])
            pipeline.train_proxy(state, train.frames, noisy)
            pipeline.train_student(state, train.frames, noisy)
            for model, net in (("proxy", state.proxy), ("student", state.student)):
                rep = evaluate(net, test)
                out.cells.append({"kind": kind, "target": target, "label_iou": level.achieved_iou,
                                  "model": model, "test_iou": rep.mean_iou})
    return out


def endpoint_mass(hist):
    """Fraction of the histogram in the first and last bins ([0, 0.1) and [0.9, 1])."""
    total = sum(hist)
    return (hist[0] + hist[-1]) / total if total else 0.0


# -- paired statistics ------------------------------------------------------

def paired_t_test(a, b):
    """Two-sided paired t-test on a - b.

    All-zero differences give (0, 1); zero-variance nonzero-mean differences
    give (+-inf, 0).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ParameterError(f"samples must be 1-D and equal length, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise ParameterError("need at least two pairs")
    d = a - b
    if np.all(d == 0):
        return 0.0, 1.0
    if np.all(d == d[0]):
        return math.copysign(math.inf, d[0]), 0.0
    res = stats.ttest_rel(a, b)
    return float(res.statistic), float(res.pvalue)


def cohens_d(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ParameterError("each sample needs at least two values")
    na, nb = len(a), len(b)
    pooled = math.sqrt(((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2))
    diff = a.mean() - b.mean()
    if pooled == 0:
        if diff == 0:
            return 0.0
        raise UndefinedEffectError("pooled standard deviation is zero")
    return float(diff / pooled)


def effect_band(d):
    d = abs(d)
    if d > 1.2:
        return "very large"
    if d >= 0.8:
        return "large"
    if d >= 0.5:
        return "medium/high"
    if d >= 0.2:
        return "medium/small"
    return "negligible"


# -- reports and plots ------------------------------------------------------

def _fmt(v):
    return repr(v) if isinstance(v, float) else ("" if v is None else v)


def write_csv(path, rows, columns=None):
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


def _figure():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata={"Software": None})
    _figure().close(fig)


def plot_trace(history, path):
    """Per-stage metric curves from a training trace (rows as written to metrics.csv)."""
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 4))
    for stage in ("teacher", "proxy", "student"):
        rows = [r for r in history if r["stage"] == stage and r.get("iou_gt") not in ("", None)]
        if rows:
            ax.plot(range(1, len(rows) + 1), [float(r["iou_gt"]) for r in rows], marker="o", label=stage)
    ax.set_xlabel("epoch (per stage)")
    ax.set_ylabel("test IoU")
    ax.set_ylim(0, 1)
    ax.legend()
    _save(fig, path)


def plot_sweep(rows, path):
    plt = _figure()
    ws = sorted({r["w"] for r in rows})
    es = sorted({r["eps"] for r in rows})
    grid = np.full((len(ws), len(es), 2), np.nan)
    for r in rows:
        i, j = ws.index(r["w"]), es.index(r["eps"])
        grid[i, j] = (r["fraction"], np.nan if r["eff_iou"] is None else r["eff_iou"])
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, k, title in zip(axes, range(2), ("effective fraction", "effective IoU")):
        im = ax.imshow(grid[..., k], vmin=0, vmax=1, cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(es)), [f"{e:g}" for e in es])
        ax.set_yticks(range(len(ws)), [str(w) for w in ws])
        ax.set_xlabel("threshold")
        ax.set_ylabel("window")
        ax.set_title(title)
        fig.colorbar(im, ax=ax)
    _save(fig, path)


def plot_histograms(histograms, path):
    plt = _figure()
    keys = sorted(histograms)
    fig, axes = plt.subplots(1, len(keys), figsize=(2.2 * len(keys), 2.4), squeeze=False)
    edges = np.linspace(0, 1, HIST_BINS + 1)
    for ax, k in zip(axes[0], keys):
        h = np.asarray(histograms[k], dtype=float)
        ax.bar(edges[:-1], h / max(h.sum(), 1), width=1 / HIST_BINS, align="edge")
        ax.set_title(k, fontsize=7)
        ax.set_ylim(0, 1)
    _save(fig, path)
