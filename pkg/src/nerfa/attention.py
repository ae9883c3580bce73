"""Self-attention and the pre-norm residual block ``SelfAtten(LN(X)) + X``."""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, List, Optional

import numpy as np

from .autograd import LN_EPS, Tensor, layer_norm, matmul, multiply, reshape, softmax, swapaxes
from .embedding import uniform_init

LITERAL = "literal"
PROJECTED = "projected"

_active_counter: Optional["MaddCounter"] = None


class ConfigError(ValueError):
    pass


class MaddCounter:
    """Tally of attention score and value multiply-adds, keyed by stage name."""

    def __init__(self):
        self.counts: dict = {}

    def add(self, stage: str, n: int) -> None:
        self.counts[stage] = self.counts.get(stage, 0) + n


@contextmanager
def count_attention() -> Iterator[MaddCounter]:
    global _active_counter
    prev, _active_counter = _active_counter, MaddCounter()
    try:
        yield _active_counter
    finally:
        _active_counter = prev


@dataclass
class AttentionParams:
    mode: str = PROJECTED
    heads: int = 1
    wq: Optional[Tensor] = None
    wk: Optional[Tensor] = None
    wv: Optional[Tensor] = None
    wo: Optional[Tensor] = None

    @classmethod
    def init(cls, d: int, heads: int, rng: np.random.Generator, mode: str = PROJECTED,
             prefix: str = "attn") -> "AttentionParams":
        if mode == LITERAL:
            return cls(mode=LITERAL, heads=1)
        if mode != PROJECTED:
            raise ConfigError(f"unknown attention mode {mode!r}")
        if heads < 1 or d % heads:
            raise ConfigError(f"d={d} is not divisible by heads={heads}")
        w = {k: uniform_init(rng, (d, d), d, f"{prefix}.{k}") for k in ("wq", "wk", "wv", "wo")}
        return cls(mode=PROJECTED, heads=heads, **w)

    def tensors(self) -> dict:
        if self.mode == LITERAL:
            return {}
        return {t.name: t for t in (self.wq, self.wk, self.wv, self.wo)}


@dataclass
class BlockParams:
    """``L`` stacked layers; each has its own attention and layer-norm affine."""

    attention: List[AttentionParams]
    ln_gamma: List[Tensor]
    ln_beta: List[Tensor]

    @classmethod
    def init(cls, d: int, heads: int, layers: int, rng: np.random.Generator,
             mode: str = PROJECTED, prefix: str = "block") -> "BlockParams":
        if layers < 1:
            raise ConfigError(f"layers must be >= 1, got {layers}")
        attn, gam, bet = [], [], []
        for i in range(layers):
            attn.append(AttentionParams.init(d, heads, rng, mode, prefix=f"{prefix}.{i}"))
            gam.append(Tensor(np.ones(d), requires_grad=True, name=f"{prefix}.{i}.ln_gamma"))
            bet.append(Tensor(np.zeros(d), requires_grad=True, name=f"{prefix}.{i}.ln_beta"))
        return cls(attn, gam, bet)

    @property
    def layers(self) -> int:
        return len(self.attention)

    def tensors(self) -> dict:
        out = {}
        for a, g, b in zip(self.attention, self.ln_gamma, self.ln_beta):
            out[g.name] = g
            out[b.name] = b
            out.update(a.tensors())
        return out


def _attend(q: Tensor, k: Tensor, v: Tensor, scale: float, stage: Optional[str]) -> Tensor:
    scores = multiply(matmul(q, swapaxes(k, -1, -2)), scale)
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    if _active_counter is not None and stage is not None:
        *batch, n, dh = q.shape
        _active_counter.add(stage, 2 * math.prod(batch) * n * n * dh)
    return out


def self_attention(x: Tensor, params: AttentionParams, stage: Optional[str] = None) -> Tensor:
    """Attention over the second-to-last axis of ``x`` (shape ``(..., n, d)``).

    Literal mode is ``softmax(X X^T / sqrt(d)) X`` with no weights. Projected
    mode splits learned Q/K/V into heads, attends per head with scale
    ``1/sqrt(d/H)``, concatenates and applies the output projection.
    """
    d = x.shape[-1]
    if params.mode == LITERAL:
        return _attend(x, x, x, 1.0 / math.sqrt(d), stage)
    h = params.heads
    if d % h:
        raise ConfigError(f"d={d} is not divisible by heads={h}")
    dh = d // h
    lead, n = x.shape[:-2], x.shape[-2]

    def split(t: Tensor) -> Tensor:
        return swapaxes(reshape(t, lead + (n, h, dh)), -3, -2)

    q = split(matmul(x, params.wq))
    k = split(matmul(x, params.wk))
    v = split(matmul(x, params.wv))
    heads = _attend(q, k, v, 1.0 / math.sqrt(dh), stage)
    merged = reshape(swapaxes(heads, -3, -2), lead + (n, d))
    return matmul(merged, params.wo)


def attention_weights(x: np.ndarray, params: AttentionParams) -> np.ndarray:
    """Softmax weights of each head, shape ``(..., H, n, n)``; for inspection."""
    d = x.shape[-1]
    if params.mode == LITERAL:
        s = x @ np.swapaxes(x, -1, -2) / math.sqrt(d)
        s = s[..., None, :, :]
    else:
        h, dh = params.heads, d // params.heads
        lead, n = x.shape[:-2], x.shape[-2]
        q = np.swapaxes((x @ params.wq.data).reshape(lead + (n, h, dh)), -3, -2)
        k = np.swapaxes((x @ params.wk.data).reshape(lead + (n, h, dh)), -3, -2)
        s = q @ np.swapaxes(k, -1, -2) / math.sqrt(dh)
    s = np.exp(s - s.max(axis=-1, keepdims=True))
    return s / s.sum(axis=-1, keepdims=True)


def transformer_block(x: Tensor, params: BlockParams, stage: Optional[str] = None,
                      eps: float = LN_EPS) -> Tensor:
    """``X <- SelfAtten(LN(X)) + X`` for each layer in order."""
    for attn, g, b in zip(params.attention, params.ln_gamma, params.ln_beta):
        x = self_attention(layer_norm(x, g, b, eps), attn, stage) + x
    return x


__all__ = [
    "AttentionParams", "BlockParams", "ConfigError", "MaddCounter", "LITERAL", "PROJECTED",
    "attention_weights", "count_attention", "self_attention", "transformer_block",
]
