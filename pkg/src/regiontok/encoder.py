"""Point-prompt region encoder.

Prompts become ``k`` queries each (RFF position + learned embedding), are
refined by a stack of decoder layers (cross-attention over position-augmented
patch tokens, self-attention within each prompt's queries, LayerNorm), and are
finally pooled by a single-head cross-attention that has no value or output
projection. The pooled vectors therefore stay in the patch-feature space, and
each attention row doubles as a soft region mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .numerics import RffParams, rff_embed_many

INIT_STD = 0.02


class ConfigurationError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 32
    k: int = 3
    layers: int = 2
    heads: int = 8
    mlp_hidden: int | None = None
    dropout: float = 0.1
    seed: int = 0
    rff_sigma: float = 10.0
    # ablation switches: no pooling reads the patch under each prompt; no text
    # alignment replaces the trained projector with a frozen linear map
    pooling: bool = True
    text_alignment: bool = True

    def __post_init__(self):
        if self.mlp_hidden is None:
            self.mlp_hidden = 2 * self.d
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")
        # layers=0 is allowed for tests that pool raw encoded prompts
        if self.layers < 0:
            raise ConfigurationError("layers must be >= 0")
        if self.d % self.heads:
            raise ConfigurationError(f"d={self.d} not divisible by heads={self.heads}")
        if self.d % 2:
            raise ConfigurationError("d must be even for the RFF embedding")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")


def make_grid(rows: int, cols: int) -> list[tuple[float, float]]:
    """Row-major cell centers of a rows x cols grid in normalized coordinates."""
    if rows < 1 or cols < 1:
        raise ConfigurationError("grid needs at least one row and column")
    return [((c + 0.5) / cols, (r + 0.5) / rows) for r in range(rows) for c in range(cols)]


@dataclass
class FeatureGrid:
    """Patch tokens of one frame, stored row-major as (h*w, d)."""

    h: int
    w: int
    tokens: np.ndarray

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.float32)
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.h * self.w:
            raise ConfigurationError(
                f"tokens shape {self.tokens.shape} does not match {self.h}x{self.w} grid"
            )

    @property
    def d(self) -> int:
        return self.tokens.shape[1]

    @property
    def num_patches(self) -> int:
        return self.h * self.w

    def patch_centers(self) -> np.ndarray:
        return np.asarray(make_grid(self.h, self.w))

    def pos_enc(self, rff: RffParams) -> np.ndarray:
        return rff_embed_many(self.patch_centers(), rff).astype(np.float32)

    def patch_index(self, x: float, y: float) -> int:
        col = min(int(x * self.w), self.w - 1)
        row = min(int(y * self.h), self.h - 1)
        return row * self.w + col


@dataclass
class PointQuerySet:
    prompts: np.ndarray  # (P, 2)
    queries: np.ndarray  # (P, k, d)
    learned_embeddings: np.ndarray  # (k, d)


@dataclass
class RegionToken:
    vector: np.ndarray
    attn_mask: np.ndarray
    source_prompt: tuple[float, float]
    query_index: int


@dataclass
class TextAlignedToken:
    vector: np.ndarray
    source: object = field(default=None, repr=False)


class Attention(nn.Module):
    """Multi-head attention with separate q/k/v/o projections."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, lq, d = x.shape
        lk = ctx.shape[1]
        dh = d // self.heads
        q = self.q(x).view(b, lq, self.heads, dh).transpose(1, 2)
        k = self.k(ctx).view(b, lk, self.heads, dh).transpose(1, 2)
        v = self.v(ctx).view(b, lk, self.heads, dh).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, lq, d)
        return self.o(out)


class DecoderLayer(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.cross = Attention(d, heads)
        self.self_attn = Attention(d, heads)
        self.norm = nn.LayerNorm(d, eps=1e-5)

    def forward(self, queries: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        """queries (B, P, k, d); keys (B, N, d) position-augmented patch tokens."""
        b, p, k, d = queries.shape
        x = queries.reshape(b, p * k, d)
        x = x + self.cross(x, keys)
        # self-attention only among the k queries of one prompt
        x = x.reshape(b * p, k, d)
        x = x + self.self_attn(x, x)
        return self.norm(x).reshape(b, p, k, d)


class TextProjector(nn.Module):
    """Two-layer MLP into the text embedding space (exact GELU, dropout in training)."""

    def __init__(self, d: int, hidden: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)
        self.dropout = dropout

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        h = nn.functional.gelu(self.fc1(x))
        if self.training and self.dropout > 0:
            if generator is None:
                raise ConfigurationError("training-mode dropout needs a seeded generator")
            keep = torch.rand(h.shape, generator=generator, dtype=h.dtype) >= self.dropout
            h = h * keep / (1.0 - self.dropout)
        return self.fc2(h)


class RegionEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.rff = RffParams.create(cfg.d, seed=cfg.seed, sigma=cfg.rff_sigma)
        self.query_embed = nn.Parameter(torch.zeros(cfg.k, cfg.d))
        self.layers = nn.ModuleList(DecoderLayer(cfg.d, cfg.heads) for _ in range(cfg.layers))
        self.pool_q = nn.Linear(cfg.d, cfg.d)
        self.pool_k = nn.Linear(cfg.d, cfg.d)
        self.projector = TextProjector(cfg.d, cfg.mlp_hidden, cfg.dropout)
        self.register_buffer("text_map", torch.eye(cfg.d))
        self.reset_parameters(cfg.seed)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif "norm" in name:
                nn.init.ones_(p)
            else:
                with torch.no_grad():
                    p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * INIT_STD)

    @property
    def dtype(self) -> torch.dtype:
        return self.query_embed.dtype

    def positional(self, coords: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(rff_embed_many(coords, self.rff), dtype=self.dtype)

    def encode_prompts(self, prompts: torch.Tensor, pe: torch.Tensor | None = None) -> torch.Tensor:
        """(B, P, 2) prompts -> (B, P, k, d) queries = RFF(prompt) + learned row j."""
        if pe is None:
            pe = self.positional(prompts.reshape(-1, 2).cpu().numpy()).reshape(*prompts.shape[:2], -1)
        return pe[:, :, None, :] + self.query_embed[None, None]

    def decode(self, queries: torch.Tensor, keys: torch.Tensor, pe: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            if i > 0:
                queries = queries + pe[:, :, None, :]
            queries = layer(queries, keys)
        return queries

    def final_pool(self, queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor):
        """Single-head pooling. Returns (vectors (B,P,k,d), masks (B,P,k,N))."""
        b, p, k, d = queries.shape
        q = self.pool_q(queries).reshape(b, p * k, d)
        kk = self.pool_k(keys)
        masks = torch.softmax(q @ kk.transpose(-1, -2) / math.sqrt(d), dim=-1)
        vectors = masks @ values
        return vectors.reshape(b, p, k, d), masks.reshape(b, p, k, -1)

    def forward(self, features: torch.Tensor, patch_pe: torch.Tensor, prompts: torch.Tensor,
                grid_shape: tuple[int, int] | None = None):
        """features (B, N, d); patch_pe (N, d); prompts (B, P, 2) normalized coords."""
        if features.shape[-1] != self.cfg.d:
            raise ConfigurationError(f"feature dim {features.shape[-1]} != model d {self.cfg.d}")
        if not self.cfg.pooling:
            return self.patch_lookup(features, prompts, grid_shape)
        pe = self.positional(prompts.reshape(-1, 2).cpu().numpy()).reshape(*prompts.shape[:2], -1)
        keys = features + patch_pe[None]
        queries = self.decode(self.encode_prompts(prompts, pe), keys, pe)
        return self.final_pool(queries, keys, features)

    def patch_lookup(self, features, prompts, grid_shape):
        """Tokens are the raw patch under each prompt, masks are one-hot (no decoder)."""
        if grid_shape is None:
            raise ConfigurationError("patch lookup needs the grid shape")
        h, w = grid_shape
        cols = torch.clamp((prompts[..., 0] * w).long(), 0, w - 1)
        rows = torch.clamp((prompts[..., 1] * h).long(), 0, h - 1)
        idx = rows * w + cols  # (B, P)
        vectors = torch.gather(features, 1, idx[..., None].expand(-1, -1, features.shape[-1]))
        masks = nn.functional.one_hot(idx, features.shape[1]).to(features.dtype)
        k = self.cfg.k
        return vectors[:, :, None].expand(-1, -1, k, -1), masks[:, :, None].expand(-1, -1, k, -1)

    def project(self, vectors: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        if not self.cfg.text_alignment:
            return vectors @ self.text_map.T
        return self.projector(vectors, generator)

    def set_text_map(self, matrix) -> None:
        with torch.no_grad():
            self.text_map.copy_(torch.as_tensor(np.asarray(matrix), dtype=self.text_map.dtype))

    @torch.no_grad()
    def encode(self, grid: FeatureGrid, prompts) -> list[RegionToken]:
        """Full forward pass on one frame; P*k tokens in prompt-major order."""
        prompts = np.asarray(prompts, dtype=np.float64).reshape(-1, 2)
        feats = torch.as_tensor(grid.tokens, dtype=self.dtype)[None]
        patch_pe = torch.as_tensor(grid.pos_enc(self.rff), dtype=self.dtype)
        vecs, masks = self(feats, patch_pe, torch.as_tensor(prompts)[None], (grid.h, grid.w))
        vecs, masks = vecs[0].cpu().numpy(), masks[0].cpu().numpy()
        return [
            RegionToken(vecs[i, j], masks[i, j], (float(prompts[i, 0]), float(prompts[i, 1])), j)
            for i in range(len(prompts))
            for j in range(self.cfg.k)
        ]

    @torch.no_grad()
    def project_to_text(self, vectors) -> np.ndarray:
        """Inference-mode projection (dropout off regardless of module mode)."""
        x = torch.as_tensor(np.asarray(vectors), dtype=self.dtype)
        was_training = self.projector.training
        self.projector.eval()
        try:
            return self.project(x).cpu().numpy()
        finally:
            self.projector.train(was_training)


def encode_prompts(prompts, encoder: RegionEncoder) -> PointQuerySet:
    prompts = np.asarray(prompts, dtype=np.float64).reshape(-1, 2)
    with torch.no_grad():
        q = encoder.encode_prompts(torch.as_tensor(prompts)[None])[0]
    return PointQuerySet(prompts, q.cpu().numpy(), encoder.query_embed.detach().cpu().numpy())


def project_to_text(token, encoder: RegionEncoder) -> TextAlignedToken:
    vec = token.vector if isinstance(token, RegionToken) else token
    return TextAlignedToken(encoder.project_to_text(vec), source=token)
