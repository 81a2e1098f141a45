"""Inference pipeline wiring and ablation variants."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .encoder import FeatureGrid, ModelConfig, RegionEncoder, RegionToken, make_grid
from .merging import MergeConfig, MergedToken, MergedTokenSet, merge_tokens
from .tracker import FinalTrack, TrackConfig, finalize, track_video

VARIANTS = ("full", "k1", "no-pooling", "no-text-alignment")


class UnknownVariantError(ValueError):
    pass


def variant_model_config(cfg: ModelConfig, variant: str) -> ModelConfig:
    if variant == "full":
        return cfg
    if variant == "k1":
        return replace(cfg, k=1)
    if variant == "no-pooling":
        return replace(cfg, k=1, pooling=False)
    if variant == "no-text-alignment":
        return replace(cfg, text_alignment=False)
    raise UnknownVariantError(f"unknown ablation variant {variant!r}; choose from {VARIANTS}")


@dataclass
class Pipeline:
    model: RegionEncoder
    merge_cfg: MergeConfig
    track_cfg: TrackConfig
    merging_enabled: bool = True
    prompt_grid: int = 0  # 0 = one prompt per patch

    def prompts_for(self, grid: FeatureGrid) -> list[tuple[float, float]]:
        if self.prompt_grid:
            return make_grid(self.prompt_grid, self.prompt_grid)
        return make_grid(grid.h, grid.w)

    def region_tokens(self, grid: FeatureGrid, prompts=None) -> list[RegionToken]:
        return self.model.encode(grid, self.prompts_for(grid) if prompts is None else prompts)

    def merged(self, grid: FeatureGrid, frame_id: int = 0) -> MergedTokenSet:
        tokens = self.region_tokens(grid)
        if self.merging_enabled:
            return merge_tokens(tokens, self.merge_cfg, frame_id)
        return unmerged(tokens, self.merge_cfg.binarize_level, frame_id)

    def text(self, vectors) -> np.ndarray:
        return self.model.project_to_text(np.asarray(vectors, dtype=np.float32))

    def image_text_tokens(self, image) -> np.ndarray:
        """Merged, text-projected tokens of a FeatureGrid (or anything carrying a ``.grid``)."""
        grid = getattr(image, "grid", image)
        return self.text(self.merged(grid).vectors())

    def video_tracks(self, grids: list[FeatureGrid]) -> list[FinalTrack]:
        frames = [self.merged(g, t + 1) for t, g in enumerate(grids)]
        return finalize(track_video(frames, self.track_cfg), self.text)


def unmerged(tokens: list[RegionToken], level: float = 0.5, frame_id: int = 0) -> MergedTokenSet:
    """Every region token as its own singleton merged token."""
    from .merging import binarize_mask

    return MergedTokenSet(
        [MergedToken(np.asarray(t.vector, np.float32), [t.source_prompt], [t.query_index],
                     binarize_mask(t.attn_mask, level), [i]) for i, t in enumerate(tokens)],
        frame_id,
    )


def ablation_variants(variant: str, cfg=None, world=None) -> Pipeline:
    """A freshly initialized pipeline wired for ``variant`` (train it with ``Trainer``)."""
    from .config import RunConfig
    from .training.trainer import build_model

    cfg = cfg or RunConfig()
    if variant not in VARIANTS:
        raise UnknownVariantError(f"unknown ablation variant {variant!r}; choose from {VARIANTS}")
    model = build_model(cfg, world, variant)
    return Pipeline(model, cfg.merge(), cfg.track(), prompt_grid=cfg.ovss_grid)
