"""Training objectives (torch) and a central-difference gradient check.

Log arguments are clipped to ``[eps, 1 - eps]``. Cross-entropy terms are
pixel means; sums in the IoU terms run over every element passed in, so a
minibatch is pooled into one ratio.
"""

from dataclasses import dataclass

import numpy as np
import torch


class EmptySelectionError(ValueError):
    pass


class GradCheckError(RuntimeError):
    pass


@dataclass
class LossConfig:
    alpha_p: float = 0.8
    alpha_s: float = 0.8
    eps_clip: float = 1e-7
    # keep the 1/sum(sel) factor in front of the student's log-IoU term
    student_iou_prefactor: bool = True

    def validate(self):
        for a in (self.alpha_p, self.alpha_s):
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"alpha must lie in [0, 1], got {a}")
        if not 0.0 < self.eps_clip < 0.5:
            raise ValueError(f"eps_clip must lie in (0, 0.5), got {self.eps_clip}")
        return self


def _t(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def _check(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def bce_map(pred, target, eps=1e-7):
    p = pred.clamp(eps, 1.0 - eps)
    return -target * torch.log(p) - (1.0 - target) * torch.log(1.0 - p)


def cycle_loss(m, m_hat, eps=1e-7):
    """Cross-entropy between a shape prior and its cycled reconstruction."""
    m_hat = _t(m_hat)
    m = _t(m, m_hat)
    _check(m, m_hat)
    return bce_map(m_hat, m, eps).mean()


def gen_adv_loss(d_fake, eps=1e-7):
    return -torch.log(_t(d_fake).clamp(eps, 1.0 - eps)).mean()


def disc_adv_loss(d_fake, d_real, eps=1e-7):
    d_fake = _t(d_fake)
    d_real = _t(d_real, d_fake)
    return (-torch.log(1.0 - d_fake.clamp(eps, 1.0 - eps)) - torch.log(d_real.clamp(eps, 1.0 - eps))).mean()


def soft_iou_ratio(pred, target, weight=None, eps=1e-7):
    inter = pred * target
    union = pred + target - inter
    if weight is not None:
        inter = inter * weight
        union = union * weight
    return ((inter.sum() + eps) / (union.sum() + eps)).clamp(eps, 1.0)


def proxy_loss(y_p, y_t, alpha=0.8, eps=1e-7):
    """alpha * (-log soft IoU) + (1 - alpha) * mean cross-entropy."""
    y_p = _t(y_p)
    y_t = _t(y_t, y_p)
    _check(y_p, y_t)
    l_iou = -torch.log(soft_iou_ratio(y_p, y_t, eps=eps))
    l_ce = bce_map(y_p, y_t, eps).mean()
    return alpha * l_iou + (1.0 - alpha) * l_ce


def student_loss(y_s, y_t, sel, alpha=0.8, eps=1e-7, iou_prefactor=True):
    """Selection-masked version of :func:`proxy_loss`.

    Both terms are normalised by the number of selected pixels; with
    ``iou_prefactor`` that factor also multiplies the log-IoU term.
    """
    y_s = _t(y_s)
    y_t = _t(y_t, y_s)
    sel = _t(sel, y_s)
    _check(y_s, y_t)
    _check(y_s, sel)
    n_sel = sel.sum()
    if float(n_sel) <= 0:
        raise EmptySelectionError("selection mask is empty")
    l_ce = (sel * bce_map(y_s, y_t, eps)).sum() / n_sel
    l_iou = -torch.log(soft_iou_ratio(y_s, y_t, sel, eps))
    if iou_prefactor:
        l_iou = l_iou / n_sel
    return alpha * l_iou + (1.0 - alpha) * l_ce


def grad_check(loss_fn, params, inputs=(), probe_count=50, step=1e-3, seed=0):
    """Max relative error between autograd and central differences on random coordinates.

    ``loss_fn(*inputs)`` must return a scalar tensor that depends on the
    tensors in ``params``. Relative error per probe is
    ``|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)``; the floor keeps coordinates
    whose true gradient is zero from reporting pure roundoff.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn(*inputs)
    if not torch.isfinite(loss):
        raise GradCheckError(f"non-finite loss at probe point: {float(loss)}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(total, size=min(probe_count, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with torch.no_grad():
        for k in flat_idx:
            j = int(np.searchsorted(offsets, k, side="right") - 1)
            p = params[j].view(-1)
            i = int(k - offsets[j])
            orig = p[i].item()
            p[i] = orig + step
            f_plus = loss_fn(*inputs).item()
            p[i] = orig - step
            f_minus = loss_fn(*inputs).item()
            p[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradCheckError("non-finite loss during finite differences")
            numeric = (f_plus - f_minus) / (2 * step)
            analytic = grads[j].view(-1)[i].item()
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
