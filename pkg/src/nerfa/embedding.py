"""Positional embedding of 6D ray points: ``MLP(P) * proj(CosEmbed(P))``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, matmul, multiply, relu


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int, name: str) -> Tensor:
    s = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True, name=name)


def cos_embed_dim(n_freq_pos: int, n_freq_dir: int) -> int:
    return 6 + 6 * n_freq_pos + 6 * n_freq_dir


def cos_embed(points: np.ndarray, n_freq_pos: int, n_freq_dir: int) -> np.ndarray:
    """Frequency encoding of ray points.

    Layout along the last axis: the raw 6 inputs, then for k = 0..n_freq_pos-1
    ``sin(2^k pi xyz)`` followed by ``cos(2^k pi xyz)``, then the same for the
    direction with ``n_freq_dir`` frequencies.
    """
    if n_freq_pos < 0 or n_freq_dir < 0:
        raise ValueError("frequency counts must be >= 0")
    points = np.asarray(points, dtype=np.float64)
    parts = [points]
    for coords, n_freq in ((points[..., :3], n_freq_pos), (points[..., 3:6], n_freq_dir)):
        for k in range(n_freq):
            arg = (2.0**k * np.pi) * coords
            parts.append(np.sin(arg))
            parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


@dataclass
class EmbedderParams:
    w1: Tensor  # (6, d)
    b1: Tensor  # (d,)
    w2: Tensor  # (d, d)
    b2: Tensor  # (d,)
    proj: Tensor  # (D_c, d)
    n_freq_pos: int
    n_freq_dir: int

    @classmethod
    def init(cls, d: int, n_freq_pos: int, n_freq_dir: int, rng: np.random.Generator) -> "EmbedderParams":
        dc = cos_embed_dim(n_freq_pos, n_freq_dir)
        return cls(
            w1=uniform_init(rng, (6, d), 6, "emb.w1"),
            b1=uniform_init(rng, (d,), 6, "emb.b1"),
            w2=uniform_init(rng, (d, d), d, "emb.w2"),
            b2=uniform_init(rng, (d,), d, "emb.b2"),
            proj=uniform_init(rng, (dc, d), dc, "emb.proj"),
            n_freq_pos=n_freq_pos,
            n_freq_dir=n_freq_dir,
        )

    @property
    def d(self) -> int:
        return self.w2.shape[1]

    def tensors(self) -> dict:
        return {"emb.w1": self.w1, "emb.b1": self.b1, "emb.w2": self.w2,
                "emb.b2": self.b2, "emb.proj": self.proj}


def point_mlp(points: Tensor, params: EmbedderParams) -> Tensor:
    h = relu(matmul(points, params.w1) + params.b1)
    return matmul(h, params.w2) + params.b2


def embed(points: np.ndarray, params: EmbedderParams) -> Tensor:
    """Embed ``(N_p, N_r, 6)`` ray points into ``(N_p, N_r, d)`` features."""
    p = Tensor(points)
    freq = Tensor(cos_embed(points, params.n_freq_pos, params.n_freq_dir))
    return multiply(point_mlp(p, params), matmul(freq, params.proj))
