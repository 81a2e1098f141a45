"""In-frame deduplication of region tokens."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .encoder import RegionToken
from .numerics import cosine_matrix

log = logging.getLogger(__name__)


@dataclass
class MergeConfig:
    tau_token: float = 0.975
    tau_mask: float = 0.8
    binarize_level: float = 0.5

    def __post_init__(self):
        # 0 is accepted as the degenerate "merge everything" sweep setting
        for name in ("tau_token", "tau_mask", "binarize_level"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass
class MergedToken:
    vector: np.ndarray
    member_prompts: list[tuple[float, float]]
    member_query_indices: list[int]
    union_mask: np.ndarray  # bool over patches
    members: list[int] = field(default_factory=list)  # input token indices


@dataclass
class MergedTokenSet:
    tokens: list[MergedToken]
    frame_id: int = 0

    def __len__(self) -> int:
        return len(self.tokens)

    def vectors(self) -> np.ndarray:
        return np.stack([t.vector for t in self.tokens]) if self.tokens else np.zeros((0, 0))


def binarize_mask(attn_mask, level: float = 0.5) -> np.ndarray:
    """Max-normalize a soft mask and keep entries strictly above ``level``."""
    m = np.asarray(attn_mask, dtype=np.float64)
    if (m < 0).any():
        raise ValueError("mask has negative entries")
    peak = m.max(initial=0.0)
    if peak == 0.0:
        log.warning("binarizing an all-zero mask")
        return np.zeros(m.shape, dtype=bool)
    return m / peak > level


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("mask length mismatch")
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def iou_matrix(masks: np.ndarray) -> np.ndarray:
    m = masks.astype(np.float64)
    inter = m @ m.T
    area = m.sum(axis=1)
    union = area[:, None] + area[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def merge_graph(vectors: np.ndarray, binary_masks: np.ndarray, cfg: MergeConfig) -> np.ndarray:
    """Adjacency of the threshold graph (diagonal excluded)."""
    n = len(vectors)
    if cfg.tau_mask == 0.0:
        # IoU >= 0 always holds, so a zero mask threshold links every pair
        adj = np.ones((n, n), dtype=bool)
    else:
        adj = (cosine_matrix(vectors, vectors) > cfg.tau_token) | (iou_matrix(binary_masks) > cfg.tau_mask)
    np.fill_diagonal(adj, False)
    return adj


def connected_components(adj: np.ndarray) -> list[list[int]]:
    """Components as sorted index lists, ordered by smallest member."""
    n = len(adj)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in zip(*np.nonzero(np.triu(adj, 1))):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def merge_tokens(tokens: list[RegionToken], cfg: MergeConfig | None = None, frame_id: int = 0) -> MergedTokenSet:
    cfg = cfg or MergeConfig()
    if not tokens:
        return MergedTokenSet([], frame_id)
    vectors = np.stack([np.asarray(t.vector, dtype=np.float64) for t in tokens])
    masks = np.stack([binarize_mask(t.attn_mask, cfg.binarize_level) for t in tokens])
    merged = []
    for comp in connected_components(merge_graph(vectors, masks, cfg)):
        merged.append(
            MergedToken(
                vector=vectors[comp].mean(axis=0).astype(np.float32),
                member_prompts=[tokens[i].source_prompt for i in comp],
                member_query_indices=[tokens[i].query_index for i in comp],
                union_mask=masks[comp].any(axis=0),
                members=comp,
            )
        )
    return MergedTokenSet(merged, frame_id)
