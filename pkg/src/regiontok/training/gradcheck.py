"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .losses import attention_loss, distillation_loss, text_contrastive_loss, visual_contrastive_loss

FD_STEP = 1e-7
GRAD_TOL = 1e-4


def grad_check(loss_fn: Callable, params: Sequence[np.ndarray], rng: np.random.Generator,
               n_coords: int = 200, step: float = FD_STEP) -> float:
    """Max relative error between ``loss_fn``'s gradients and central differences.

    ``loss_fn(*params) -> (value, grads)`` with one gradient array per param.
    Up to ``n_coords`` coordinates are probed (all of them if there are fewer).
    Relative error is |a - n| / max(1, |a|, |n|).
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    _, grads = loss_fn(*params)
    coords = [(pi, idx) for pi, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in pick]
    worst = 0.0
    for pi, idx in coords:
        p = params[pi]
        orig = p[idx]
        p[idx] = orig + step
        up = loss_fn(*params)[0]
        p[idx] = orig - step
        down = loss_fn(*params)[0]
        p[idx] = orig
        numeric = (up - down) / (2 * step)
        analytic = float(grads[pi][idx])
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        worst = max(worst, err)
    return worst


def random_loss_problems(rng: np.random.Generator, n: int = 8, d: int = 6, patches: int = 10):
    """One random small batch per loss: name -> (loss_fn, params)."""
    regions = rng.integers(0, 3, size=n)
    clusters = rng.integers(0, 4, size=n)
    text = rng.normal(size=(n, d))
    tv, tt = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    gt = rng.random((n, patches)) < 0.4
    gt[np.arange(n), rng.integers(0, patches, size=n)] = True
    logits = rng.normal(size=(n, patches))
    masks = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)

    def vis(x):
        v, g, _ = visual_contrastive_loss(x, regions, 0.1)
        return v, [g]

    def txt(x):
        v, g, _ = text_contrastive_loss(x, text, clusters, 0.1)
        return v, [g]

    def dist(pv, pt):
        v, (gv, gt_), _ = distillation_loss(pv, pt, tv, tt)
        return v, [gv, gt_]

    def attn(a):
        v, g, _ = attention_loss(a, gt)
        return v, [g]

    return {
        "visual_contrastive": (vis, [rng.normal(size=(n, d))]),
        "text_contrastive": (txt, [rng.normal(size=(n, d))]),
        "distillation": (dist, [rng.normal(size=(n, d)), rng.normal(size=(n, d))]),
        "attention": (attn, [masks]),
    }


def run_suite(seed: int = 0, batches: int = 20, n_coords: int = 200) -> dict[str, float]:
    """Worst relative error per loss over ``batches`` random small batches."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(batches):
        for name, (fn, params) in random_loss_problems(rng).items():
            worst[name] = max(worst.get(name, 0.0), grad_check(fn, params, rng, n_coords))
    return worst
