"""Dense numeric primitives shared across the pipeline.

Everything here is a pure numpy function. The encoder has torch twins of
softmax/layer norm/GELU for autograd; tests tie the two together.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

log = logging.getLogger(__name__)

DEFAULT_RFF_SIGMA = 10.0
LN_EPS = 1e-5


class InvalidInputError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    pass


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v)
    if not np.issubdtype(v.dtype, np.floating):
        v = v.astype(np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise InvalidInputError("softmax of an empty vector")
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if (na == 0).any() or (nb == 0).any():
        raise DegenerateVectorError("cosine similarity of a zero vector")
    return np.clip((a / na) @ (b / nb).T, -1.0, 1.0)


def l2_normalize(x, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    if (n == 0).any():
        raise DegenerateVectorError("cannot normalize a zero vector")
    return x / n


def layer_norm(v, gain=None, bias=None, eps: float = LN_EPS) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    out = (v - mu) / np.sqrt(var + eps)
    if gain is not None:
        out = out * np.asarray(gain)
    if bias is not None:
        out = out + np.asarray(bias)
    return out


def gelu(v) -> np.ndarray:
    # exact erf form, not the tanh approximation
    v = np.asarray(v, dtype=np.float64)
    return 0.5 * v * (1.0 + erf(v / math.sqrt(2.0)))


@dataclass(frozen=True)
class RffParams:
    """Frozen Gaussian random Fourier feature frequencies, shape (num_freq, 2)."""

    frequencies: np.ndarray
    seed: int = 0
    sigma: float = DEFAULT_RFF_SIGMA

    @classmethod
    def create(cls, d: int, seed: int = 0, sigma: float = DEFAULT_RFF_SIGMA) -> "RffParams":
        if d % 2:
            raise InvalidInputError("RFF embedding dimension must be even")
        rng = np.random.default_rng(seed)
        freqs = rng.normal(0.0, sigma, size=(d // 2, 2))
        freqs.setflags(write=False)
        return cls(frequencies=freqs, seed=seed, sigma=sigma)

    @property
    def dim(self) -> int:
        return 2 * self.frequencies.shape[0]


def rff_embed_many(coords, p: RffParams) -> np.ndarray:
    """Embed an (n, 2) array of normalized (x, y) coordinates; sines first, then cosines."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if ((coords < 0.0) | (coords > 1.0)).any():
        log.warning("clamping coordinates outside [0, 1]")
        coords = np.clip(coords, 0.0, 1.0)
    proj = 2.0 * np.pi * coords @ p.frequencies.T
    return np.concatenate([np.sin(proj), np.cos(proj)], axis=1)


def rff_embed(x: float, y: float, p: RffParams) -> np.ndarray:
    return rff_embed_many([[x, y]], p)[0]
