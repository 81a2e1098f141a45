"""Training objectives with hand-derived gradients.

Each loss is a numpy function returning ``(value, grads, diagnostics)`` where
``grads`` are taken with respect to the un-normalized inputs. ``as_torch``
wraps one as an autograd op so the encoder can backprop through it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..numerics import DegenerateVectorError

BCE_CLAMP = 1e-7


@dataclass
class LossConfig:
    temperature: float = 0.1
    w_visual: float = 1.0
    w_text: float = 1.0
    w_distill: float = 1.0
    w_attn: float = 1.0
    dice_eps: float = 1.0
    include_positive_in_denominator: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def _normalize(x: np.ndarray):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if (norm == 0).any():
        raise DegenerateVectorError("zero-norm vector in loss input")
    return x / norm, norm


def _normalize_backward(u: np.ndarray, norm: np.ndarray, du: np.ndarray) -> np.ndarray:
    return (du - u * np.sum(u * du, axis=-1, keepdims=True)) / norm


def _masked_softmax(logits: np.ndarray, mask: np.ndarray):
    """Row-wise log-sum-exp and softmax restricted to ``mask`` (rows with no entry -> 0)."""
    z = np.where(mask, logits, -np.inf)
    top = z.max(axis=1, keepdims=True)
    top[~np.isfinite(top)] = 0.0
    z -= top
    np.exp(z, out=z)  # exp(-inf) = 0 outside the mask
    s = z.sum(axis=1, keepdims=True)
    safe = np.where(s > 0, s, 1.0)
    z /= safe
    return (np.log(safe) + top)[:, 0], z


def visual_contrastive_loss(vectors, region_ids, temperature: float = 0.1):
    """Supervised contrastive loss over region tokens; positives share a region id.

    Anchors without any positive are skipped; the mean runs over the rest.
    """
    x = np.asarray(vectors, dtype=np.float64)
    ids = np.asarray(region_ids)
    n = len(x)
    u, norm = _normalize(x)
    s = u @ u.T / temperature
    off = ~np.eye(n, dtype=bool)
    pos = (ids[:, None] == ids[None, :]) & off
    valid = pos.any(axis=1)
    n_valid = int(valid.sum())
    diag = {"skipped": n - n_valid, "anchors": n_valid}
    if n_valid == 0:
        return 0.0, np.zeros_like(x), diag
    lse_all, p_all = _masked_softmax(s, off)
    lse_pos, p_pos = _masked_softmax(s, pos)
    loss = float(np.sum((lse_all - lse_pos)[valid]) / n_valid)
    g = np.where(valid[:, None], p_all - p_pos, 0.0) / n_valid
    du = (g + g.T) @ u / temperature
    return loss, _normalize_backward(u, norm, du), diag


def text_contrastive_loss(tokens, text, cluster_ids, temperature: float = 0.1,
                          include_positive_in_denominator: bool = False):
    """Symmetric region-text contrastive loss.

    Denominators only contain rows from a different synonym cluster. By
    default the positive pair is *not* in the denominator, so the value can be
    negative; the flag restores the usual normalized form. Gradient is taken
    w.r.t. ``tokens`` only.
    """
    x = np.asarray(tokens, dtype=np.float64)
    t = np.asarray(text, dtype=np.float64)
    cl = np.asarray(cluster_ids)
    n = len(x)
    r, norm = _normalize(x)
    tn, _ = _normalize(t)
    a = r @ tn.T / temperature
    neg = cl[:, None] != cl[None, :]
    valid = neg.any(axis=1)
    n_valid = int(valid.sum())
    diag = {"skipped": n - n_valid, "anchors": n_valid}
    if n_valid == 0:
        return 0.0, np.zeros_like(x), diag
    denom = neg | np.eye(n, dtype=bool) if include_positive_in_denominator else neg
    lse_row, p_row = _masked_softmax(a, denom)
    lse_col, p_col = _masked_softmax(a.T, denom)  # row i of a.T is column i of a
    pos = np.diag(a)
    per = (pos - lse_row) + (pos - lse_col)
    loss = float(-np.sum(per[valid]) / (2 * n_valid))
    vmask = valid[:, None].astype(np.float64)
    da = (p_row * vmask + (p_col * vmask).T) / (2 * n_valid)
    da[np.diag_indices(n)] -= valid / n_valid
    dr = da @ tn / temperature
    return loss, _normalize_backward(r, norm, dr), diag


def _cos_rows(a: np.ndarray, b: np.ndarray):
    ua, na = _normalize(a)
    ub, _ = _normalize(b)
    cos = np.sum(ua * ub, axis=1)
    grad = (ub - ua * cos[:, None]) / na
    return cos, grad


def distillation_loss(pred_visual, pred_text, target_visual, target_text):
    """Mean over the batch of (1 - cos) in the visual plus the text space."""
    pv = np.atleast_2d(np.asarray(pred_visual, dtype=np.float64))
    pt = np.atleast_2d(np.asarray(pred_text, dtype=np.float64))
    tv = np.atleast_2d(np.asarray(target_visual, dtype=np.float64))
    tt = np.atleast_2d(np.asarray(target_text, dtype=np.float64))
    n = len(pv)
    cv, gv = _cos_rows(pv, tv)
    ct, gt = _cos_rows(pt, tt)
    loss = float(np.sum((1 - cv) + (1 - ct)) / n)
    return loss, (-gv / n, -gt / n), {"cos_visual": cv, "cos_text": ct}


def attention_loss(attn_masks, gt_masks, dice_eps: float = 1.0):
    """BCE + soft DICE between max-normalized attention masks and binary targets.

    BCE is the mean over patches with probabilities clamped to [1e-7, 1-1e-7];
    DICE uses the unclamped normalized mask. Averaged over masks.
    """
    a = np.atleast_2d(np.asarray(attn_masks, dtype=np.float64))
    m = np.atleast_2d(np.asarray(gt_masks, dtype=np.float64))
    if a.shape != m.shape:
        raise ValueError("attention/gt mask shape mismatch")
    n, npatch = a.shape
    amax = a.max(axis=1)
    arg = a.argmax(axis=1)
    safe = np.where(amax > 0, amax, 1.0)
    an = np.where(amax[:, None] > 0, a / safe[:, None], 0.0)
    p = np.clip(an, BCE_CLAMP, 1 - BCE_CLAMP)
    bce = -np.mean(m * np.log(p) + (1 - m) * np.log(1 - p), axis=1)
    inter = np.sum(an * m, axis=1)
    den = an.sum(axis=1) + m.sum(axis=1) + dice_eps
    dice = 1 - (2 * inter + dice_eps) / den
    loss = float(np.mean(bce + dice))

    inside = (an > BCE_CLAMP) & (an < 1 - BCE_CLAMP)
    g = np.where(inside, (-m / p + (1 - m) / (1 - p)) / npatch, 0.0)
    g += -(2 * m * den[:, None] - (2 * inter + dice_eps)[:, None]) / den[:, None] ** 2
    ga = g / safe[:, None]
    rows = np.arange(n)
    ga[rows, arg] -= np.sum(g * a, axis=1) / safe**2
    ga = np.where(amax[:, None] > 0, ga, 0.0) / n
    return loss, ga, {"bce": bce, "dice": dice}


class _NumpyLoss(torch.autograd.Function):
    @staticmethod
    def forward(ctx, fn, *inputs):
        arrays = [x.detach().to(torch.float64).cpu().numpy() for x in inputs]
        value, grads = fn(*arrays)
        ctx.grads = [None if g is None else torch.as_tensor(g, dtype=x.dtype) for g, x in zip(grads, inputs)]
        return torch.tensor(value, dtype=inputs[0].dtype)

    @staticmethod
    def backward(ctx, grad_out):
        return (None, *[None if g is None else g * grad_out for g in ctx.grads])


def as_torch(fn, *inputs: torch.Tensor) -> torch.Tensor:
    """Evaluate ``fn(*arrays) -> (value, grads)`` as a differentiable torch scalar."""
    return _NumpyLoss.apply(fn, *inputs)


def torch_visual_contrastive(vectors, region_ids, temperature):
    def fn(x):
        v, g, _ = visual_contrastive_loss(x, region_ids, temperature)
        return v, [g]

    return as_torch(fn, vectors)


def torch_text_contrastive(tokens, text, cluster_ids, temperature, include_positive=False):
    def fn(x):
        v, g, _ = text_contrastive_loss(x, text, cluster_ids, temperature, include_positive)
        return v, [g]

    return as_torch(fn, tokens)


def torch_distillation(pred_visual, pred_text, target_visual, target_text):
    def fn(pv, pt):
        v, (gv, gt), _ = distillation_loss(pv, pt, target_visual, target_text)
        return v, [gv, gt]

    return as_torch(fn, pred_visual, pred_text)


def torch_attention(attn_masks, gt_masks, dice_eps=1.0):
    def fn(a):
        v, g, _ = attention_loss(a, gt_masks, dice_eps)
        return v, [g]

    return as_torch(fn, attn_masks)
