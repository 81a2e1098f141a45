"""Batch assembly, optimization schedule and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ..config import RunConfig
from ..encoder import FeatureGrid, RegionEncoder
from ..numerics import cosine_matrix
from ..synth import GroundTruthRegion, SynthScene, SynthWorld, gen_scene
from .hungarian import hungarian_match
from .losses import (
    torch_attention,
    torch_distillation,
    torch_text_contrastive,
    torch_visual_contrastive,
)

log = logging.getLogger(__name__)


class EmptySupervisionError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, breakdown: dict):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step
        self.breakdown = breakdown


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup: int = 1500
    total_steps: int = 60000
    final_fraction: float = 0.5
    clip: float = 5.0
    batch_size: int = 16
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.warmup <= self.total_steps:
            raise ValueError("need 0 <= warmup <= total_steps")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be >= 1")
        if self.lr <= 0 or self.clip <= 0 or self.weight_decay < 0:
            raise ValueError("lr and clip must be positive, weight_decay non-negative")


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear warmup to the peak, then cosine decay to ``final_fraction * peak``."""
    if step > cfg.total_steps:
        log.warning("step %d beyond total %d; clamping", step, cfg.total_steps)
        step = cfg.total_steps
    step = max(step, 0)
    if step < cfg.warmup:
        return cfg.lr * step / cfg.warmup
    span = cfg.total_steps - cfg.warmup
    progress = (step - cfg.warmup) / span if span else 0.0
    f = cfg.final_fraction
    return cfg.lr * (f + (1 - f) * 0.5 * (1 + math.cos(math.pi * progress)))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(torch.sum(g.detach().to(torch.float64) ** 2)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)
    return total


def sample_points(regions: list[GroundTruthRegion], n: int, rng: np.random.Generator,
                  grid_shape: tuple[int, int]) -> np.ndarray:
    """Patch-center prompts drawn with probability proportional to (overlap count)^2."""
    h, w = grid_shape
    if not regions:
        raise EmptySupervisionError("no regions to sample from")
    counts = np.sum([r.mask for r in regions], axis=0).astype(np.float64)
    weights = counts**2
    if weights.sum() == 0:
        raise EmptySupervisionError("no patch is covered by a region")
    idx = rng.choice(h * w, size=n, p=weights / weights.sum())
    return np.stack([(idx % w + 0.5) / w, (idx // w + 0.5) / h], axis=1)


@dataclass
class DistillTargets:
    visual: np.ndarray
    text: np.ndarray


def make_targets(region: GroundTruthRegion, grid: FeatureGrid, align) -> DistillTargets:
    """Mean of the masked patch features and its image under the frozen alignment map."""
    mask = np.asarray(region.mask, dtype=bool)
    if mask.shape != (grid.num_patches,):
        raise ValueError("mask does not fit the grid")
    if not mask.any():
        raise EmptySupervisionError("empty region mask")
    visual = grid.tokens[mask].astype(np.float64).mean(axis=0)
    text = align(visual) if callable(align) else np.asarray(align) @ visual
    return DistillTargets(visual, np.asarray(text, dtype=np.float64))


def build_cost(pred_vectors, targets: list[DistillTargets]) -> np.ndarray:
    """Cosine distance between predicted tokens (rows) and target visual tokens (cols)."""
    return 1.0 - cosine_matrix(np.asarray(pred_vectors), np.stack([t.visual for t in targets]))


@dataclass
class Matches:
    index: list[tuple[int, int, int]] = field(default_factory=list)  # (scene, prompt, query)
    region_key: list[int] = field(default_factory=list)
    cluster: list[int] = field(default_factory=list)
    text_enc: list[np.ndarray] = field(default_factory=list)
    target_visual: list[np.ndarray] = field(default_factory=list)
    target_text: list[np.ndarray] = field(default_factory=list)
    gt_mask: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.index)


def annotation_targets(covering: list[int], scene: SynthScene, annotations: int, k: int) -> list[tuple[int, int]]:
    """(region index, category id) targets for one prompt, innermost first.

    Each covering region contributes ``annotations`` labels drawn round-robin
    from its synonym cluster, the way overlapping datasets annotate one object
    under different names. Rounds interleave regions so truncation to ``k``
    drops extra annotations before it drops a coarser region.
    """
    vocab = scene.world.vocab
    out = []
    for a in range(annotations):
        for i in covering:
            cat = scene.regions[i].category_id
            syn = [c.id for c in vocab.categories if c.cluster_id == vocab.cluster_of(cat)]
            syn = syn[syn.index(cat):] + syn[: syn.index(cat)]  # the region's own label first
            out.append((i, syn[a % len(syn)]))
    return out[:k]


def match_batch(vectors: np.ndarray, scenes: list[SynthScene], prompts: np.ndarray, world: SynthWorld,
                k: int, annotations: int = 1) -> Matches:
    """Hungarian-match each prompt's k predictions against the region annotations covering it."""
    out = Matches()
    enc = world.vocab.encodings()
    for b, scene in enumerate(scenes):
        grid = scene.grid
        targets = [make_targets(r, grid, world.align) for r in scene.regions]
        masks = np.stack([r.mask for r in scene.regions])
        sizes = masks.sum(axis=1)
        for p, (x, y) in enumerate(prompts[b]):
            patch = grid.patch_index(x, y)
            covering = [int(i) for i in np.argsort(sizes, kind="stable") if masks[i, patch]][:k]
            if not covering:
                continue
            labelled = annotation_targets(covering, scene, annotations, k)
            cost = build_cost(vectors[b, p], [targets[i] for i, _ in labelled])
            for j, t in hungarian_match(cost):
                i, cat = labelled[t]
                reg = scene.regions[i]
                out.index.append((b, p, j))
                out.region_key.append(b * 100003 + reg.region_id)
                out.cluster.append(reg.category_cluster_id)
                out.text_enc.append(enc[cat])
                out.target_visual.append(targets[i].visual)
                out.target_text.append(targets[i].text)
                out.gt_mask.append(reg.mask)
    return out


def state_tensors(model: RegionEncoder) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}


def load_state(model: RegionEncoder, tensors: dict[str, np.ndarray]) -> None:
    from ..store import DimensionError

    own = model.state_dict()
    missing = set(own) - set(tensors)
    if missing:
        raise DimensionError(f"checkpoint lacks tensors: {sorted(missing)}")
    for name, arr in tensors.items():
        if name not in own:
            raise DimensionError(f"unexpected tensor {name!r} in checkpoint")
        if tuple(own[name].shape) != tuple(arr.shape):
            raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model {tuple(own[name].shape)}")
    model.load_state_dict({k: torch.as_tensor(v, dtype=own[k].dtype) for k, v in tensors.items()})


def build_model(cfg: RunConfig, world: SynthWorld | None = None, variant: str = "full") -> RegionEncoder:
    from ..pipeline import variant_model_config

    model = RegionEncoder(variant_model_config(cfg.model(), variant))
    if world is not None:
        model.set_text_map(world.align)
    return model


def save_checkpoint(path, model: RegionEncoder, cfg: RunConfig, variant: str = "full") -> None:
    from ..store import save_weights

    save_weights(path, state_tensors(model), cfg.to_text() + f"# variant={variant}\n")


def load_checkpoint(path) -> tuple[RegionEncoder, RunConfig, str]:
    from ..store import load_weights

    tensors, text = load_weights(path)
    variant = "full"
    for line in text.splitlines():
        if line.startswith("# variant="):
            variant = line.split("=", 1)[1].strip()
    cfg = RunConfig.from_text(text)
    model = build_model(cfg, variant=variant)
    load_state(model, tensors)
    model.eval()
    return model, cfg, variant


def make_world(cfg: RunConfig) -> SynthWorld:
    return SynthWorld.create(d=cfg.d, num_clusters=cfg.num_clusters, synonyms_per_cluster=cfg.synonyms_per_cluster,
                             seed=cfg.seed, feature_scale=cfg.feature_scale)


def train_scene(cfg: RunConfig, world: SynthWorld, seed: int, noise_std: float | None = None,
                grid: int | None = None) -> SynthScene:
    rng = np.random.default_rng(seed)
    n_regions = int(rng.integers(cfg.min_regions, cfg.max_regions + 1))
    g = grid or cfg.train_grid
    return gen_scene(g, g, n_regions, cfg.parts_per_region, cfg.d,
                     cfg.noise_std if noise_std is None else noise_std, seed, world)


class Trainer:
    """Owns the model, optimizer and the deterministic data/dropout streams of one run."""

    def __init__(self, cfg: RunConfig, world: SynthWorld | None = None, model: RegionEncoder | None = None,
                 variant: str = "full"):
        self.cfg = cfg
        self.world = world or make_world(cfg)
        torch.manual_seed(cfg.seed)
        self.model = model or build_model(cfg, self.world, variant)
        self.variant = variant
        self.optim_cfg = cfg.optim()
        self.loss_cfg = cfg.loss()
        self.params = [p for p in self.model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(self.params, lr=0.0, betas=self.optim_cfg.betas, eps=self.optim_cfg.eps,
                                           weight_decay=self.optim_cfg.weight_decay)
        self.dropout_gen = torch.Generator().manual_seed(cfg.seed + 1)
        self.step_count = 0

    def scenes_for(self, step: int) -> list[SynthScene]:
        return [
            train_scene(self.cfg, self.world, int(np.random.SeedSequence([self.cfg.seed, step, b]).generate_state(1)[0]))
            for b in range(self.optim_cfg.batch_size)
        ]

    def losses(self, scenes: list[SynthScene], rng: np.random.Generator) -> tuple[torch.Tensor, dict]:
        model, cfg = self.model, self.cfg
        g = scenes[0].grid
        dtype = model.dtype
        feats = torch.as_tensor(np.stack([s.grid.tokens for s in scenes]), dtype=dtype)
        patch_pe = torch.as_tensor(g.pos_enc(model.rff), dtype=dtype)
        prompts = np.stack([sample_points(s.regions, cfg.points_per_image, rng, (g.h, g.w)) for s in scenes])
        vectors, masks = model(feats, patch_pe, torch.as_tensor(prompts), (g.h, g.w))
        m = match_batch(vectors.detach().cpu().numpy(), scenes, prompts, self.world, model.cfg.k,
                        cfg.annotations_per_region)
        if not len(m):
            raise EmptySupervisionError("batch produced no matched tokens")
        b, p, j = (torch.as_tensor(a) for a in zip(*m.index))
        v = vectors[b, p, j]
        a = masks[b, p, j]
        t = model.project(v, self.dropout_gen)
        lc = self.loss_cfg
        parts = {
            "visual_contrastive": torch_visual_contrastive(v, np.array(m.region_key), lc.temperature),
            "text_contrastive": torch_text_contrastive(t, np.stack(m.text_enc), np.array(m.cluster),
                                                       lc.temperature, lc.include_positive_in_denominator),
            "distillation": torch_distillation(v, t, np.stack(m.target_visual), np.stack(m.target_text)),
            "attention": torch_attention(a, np.stack(m.gt_mask), lc.dice_eps),
        }
        weights = {"visual_contrastive": lc.w_visual, "text_contrastive": lc.w_text,
                   "distillation": lc.w_distill, "attention": lc.w_attn}
        total = sum(weights[k] * v for k, v in parts.items())
        breakdown = {k: float(v.detach()) for k, v in parts.items()}
        breakdown["total"] = float(total.detach())
        breakdown["matched"] = len(m)
        return total, breakdown

    def train_step(self, scenes: list[SynthScene] | None = None) -> dict:
        step = self.step_count
        scenes = scenes or self.scenes_for(step)
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, step, 7919]))
        self.model.train()
        total, breakdown = self.losses(scenes, rng)
        if not math.isfinite(breakdown["total"]):
            raise NonFiniteLossError(step, breakdown)
        self.optimizer.zero_grad(set_to_none=False)
        total.backward()
        breakdown["grad_norm"] = clip_grad_norm(self.params, self.optim_cfg.clip)
        lr = lr_at(step + 1, self.optim_cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        self.step_count += 1
        breakdown = {"step": self.step_count, "lr": lr, **breakdown}
        return breakdown

    def fit(self, steps: int | None = None, log_file=None, every: int = 50) -> list[dict]:
        steps = self.optim_cfg.total_steps if steps is None else steps
        history = []
        for _ in range(steps):
            rec = self.train_step()
            history.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
            if rec["step"] % every == 0:
                log.info("step %d lr %.2e total %.4f", rec["step"], rec["lr"], rec["total"])
        self.model.eval()
        return history
