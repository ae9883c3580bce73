"""NeRF-attention model family, volumetric rendering, and attention cost counting.

Variants:

* ``nerfa``  embed -> ray transformer -> feature modulation -> pixel transformer -> FC
* ``vania``  embed -> global transformer over all ray points -> mean over ray -> FC
* ``no_fm``  ``nerfa`` with the modulation replaced by a mean over the ray
* ``no_rt``  ``nerfa`` without the ray transformer
* ``no_pt``  ``nerfa`` without the pixel transformer
* ``nerf``   MLP predicting density and color, composited by :func:`nerf_render`
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Dict, Optional, Union

import numpy as np

from .attention import PROJECTED, BlockParams, ConfigError, transformer_block
from .autograd import (
    Tensor,
    as_tensor,
    cumulative_sum,
    exp,
    matmul,
    multiply,
    negate,
    relu,
    reshape,
    sigmoid,
    sum_along_axis,
)
from .embedding import EmbedderParams, cos_embed, cos_embed_dim, embed, uniform_init
from .rays import DomainError, RayPointBatch

VARIANTS = ("nerfa", "vania", "no_fm", "no_rt", "no_pt", "nerf")
ABLATION_VARIANTS = ("nerfa", "vania", "no_fm", "no_rt", "no_pt")

NERF_DEPTH = 8
NERF_WIDTH = 64


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "nerfa"
    d: int = 64
    heads: int = 8
    layers: int = 1
    freq_pos: int = 10
    freq_dir: int = 4
    attention_mode: str = PROJECTED
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.freq_pos < 0 or self.freq_dir < 0:
            raise ConfigError("frequency counts must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in raw.items():
            if k not in known:
                continue
            kwargs[k] = v if k in ("variant", "attention_mode") else int(v)
        return cls(**kwargs)

    @property
    def uses_ray_transformer(self) -> bool:
        return self.variant in ("nerfa", "no_fm", "no_pt")

    @property
    def uses_pixel_transformer(self) -> bool:
        return self.variant in ("nerfa", "no_fm", "no_rt")


@dataclass
class SigmaColorField:
    """Explicit densities, colors and sample gaps along each ray."""

    sigma: Union[Tensor, np.ndarray]  # (N_p, N_r)
    color: Union[Tensor, np.ndarray]  # (N_p, N_r, 3)
    deltas: np.ndarray  # (N_p, N_r)


def _modulation_terms(density: Tensor, deltas: Tensor) -> Tensor:
    """Per-sample weights ``exp(-sum_{j<i} delta_j x_j) * (1 - exp(-delta_i x_i))``."""
    optical = multiply(deltas, density)
    transmittance = exp(negate(cumulative_sum(optical, axis=1, exclusive=True)))
    opacity = 1.0 - exp(negate(optical))
    return multiply(transmittance, opacity)


def feature_modulation(features: Tensor, deltas: np.ndarray) -> Tensor:
    """Latent volumetric rendering of ``(N_p, N_r, d)`` features into ``(N_p, d)``.

    Every channel is treated as both density and color of its own ray.
    """
    features = as_tensor(features)
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.shape != features.shape[:2]:
        raise DomainError(f"deltas {deltas.shape} do not match features {features.shape}")
    if not (deltas > 0).all():
        raise DomainError("deltas must be positive")
    weights = _modulation_terms(features, Tensor(deltas[..., None]))
    return sum_along_axis(multiply(weights, features), axis=1)


def nerf_render(field: SigmaColorField) -> Tensor:
    """Classical volumetric compositing of explicit density and color."""
    sigma, color = as_tensor(field.sigma), as_tensor(field.color)
    if (sigma.data < 0).any():
        raise DomainError("sigma must be nonnegative")
    deltas = np.asarray(field.deltas, dtype=np.float64)
    if not (deltas > 0).all():
        raise DomainError("deltas must be positive")
    if sigma.shape != deltas.shape or color.shape != sigma.shape + (3,):
        raise DomainError(f"shape mismatch: sigma {sigma.shape}, color {color.shape}, deltas {deltas.shape}")
    weights = _render_weights(sigma, Tensor(deltas))
    return sum_along_axis(multiply(reshape(weights, weights.shape + (1,)), color), axis=1)


def _render_weights(sigma: Tensor, deltas: Tensor) -> Tensor:
    optical = multiply(sigma, deltas)
    acc = cumulative_sum(optical, axis=1, exclusive=True)
    alpha = 1.0 - exp(negate(optical))
    return multiply(exp(negate(acc)), alpha)


class NeRFAModel:
    """Parameters and forward pass for one variant; see the module docstring."""

    def __init__(self, config: ModelConfig):
        self.config = config
        c = config
        rng = np.random.default_rng(c.seed)
        self.embedder: Optional[EmbedderParams] = None
        self.ray_blocks: Optional[BlockParams] = None
        self.pixel_blocks: Optional[BlockParams] = None
        self.global_blocks: Optional[BlockParams] = None
        self.nerf_layers: list = []
        if c.variant == "nerf":
            self._init_nerf(rng)
            return
        self.embedder = EmbedderParams.init(c.d, c.freq_pos, c.freq_dir, rng)
        if c.variant == "vania":
            self.global_blocks = BlockParams.init(c.d, c.heads, c.layers, rng, c.attention_mode, "global")
        if c.uses_ray_transformer:
            self.ray_blocks = BlockParams.init(c.d, c.heads, c.layers, rng, c.attention_mode, "ray")
        if c.uses_pixel_transformer:
            self.pixel_blocks = BlockParams.init(c.d, c.heads, c.layers, rng, c.attention_mode, "pixel")
        self.head_w = uniform_init(rng, (c.d, 3), c.d, "head.w")
        self.head_b = uniform_init(rng, (3,), c.d, "head.b")

    def _init_nerf(self, rng: np.random.Generator) -> None:
        width = NERF_WIDTH
        fan = cos_embed_dim(self.config.freq_pos, self.config.freq_dir)
        for i in range(NERF_DEPTH):
            w = uniform_init(rng, (fan, width), fan, f"nerf.{i}.w")
            b = uniform_init(rng, (width,), fan, f"nerf.{i}.b")
            self.nerf_layers.append((w, b))
            fan = width
        self.head_w = uniform_init(rng, (width, 4), width, "head.w")
        self.head_b = uniform_init(rng, (4,), width, "head.b")

    def parameters(self) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        if self.embedder is not None:
            out.update(self.embedder.tensors())
        for blocks in (self.global_blocks, self.ray_blocks, self.pixel_blocks):
            if blocks is not None:
                out.update(blocks.tensors())
        for w, b in self.nerf_layers:
            out[w.name] = w
            out[b.name] = b
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    # stages -------------------------------------------------------------

    def embed(self, batch: RayPointBatch) -> Tensor:
        return embed(batch.points, self.embedder)

    def ray_transformer(self, f_emb: Tensor) -> Tensor:
        return transformer_block(f_emb, self.ray_blocks, stage="ray")

    def pixel_transformer(self, f_mod: Tensor) -> Tensor:
        return transformer_block(f_mod, self.pixel_blocks, stage="pixel")

    def global_transformer(self, f_emb: Tensor) -> Tensor:
        n_p, n_r, d = f_emb.shape
        flat = reshape(f_emb, (n_p * n_r, d))
        return reshape(transformer_block(flat, self.global_blocks, stage="global"), (n_p, n_r, d))

    def head(self, f_color: Tensor) -> Tensor:
        return sigmoid(matmul(f_color, self.head_w) + self.head_b)

    def forward(self, batch: RayPointBatch) -> Tensor:
        """Predict ``(N_p, 3)`` colors for a batch of ray points."""
        v = self.config.variant
        if v == "nerf":
            return self._forward_nerf(batch)
        f_emb = self.embed(batch)
        if v == "vania":
            return self.head(self.global_transformer(f_emb).mean(axis=1))
        f_pv = self.ray_transformer(f_emb) if self.ray_blocks is not None else f_emb
        if v == "no_fm":
            f_mod = f_pv.mean(axis=1)
        else:
            f_mod = feature_modulation(f_pv, batch.deltas)
        f_color = self.pixel_transformer(f_mod) if self.pixel_blocks is not None else f_mod
        return self.head(f_color)

    __call__ = forward

    def _forward_nerf(self, batch: RayPointBatch) -> Tensor:
        h = Tensor(cos_embed(batch.points, self.config.freq_pos, self.config.freq_dir))
        for w, b in self.nerf_layers:
            h = relu(matmul(h, w) + b)
        raw = matmul(h, self.head_w) + self.head_b  # (N_p, N_r, 4)
        field = SigmaColorField(relu(raw[..., 3]), sigmoid(raw[..., :3]), batch.deltas)
        return nerf_render(field)


def parameter_shapes(config: ModelConfig) -> Dict[str, tuple]:
    """Name -> shape of every parameter, in the order :meth:`NeRFAModel.parameters` yields."""
    c = config
    out: Dict[str, tuple] = {}
    if c.variant == "nerf":
        fan = cos_embed_dim(c.freq_pos, c.freq_dir)
        for i in range(NERF_DEPTH):
            out[f"nerf.{i}.w"], out[f"nerf.{i}.b"] = (fan, NERF_WIDTH), (NERF_WIDTH,)
            fan = NERF_WIDTH
        out["head.w"], out["head.b"] = (NERF_WIDTH, 4), (4,)
        return out
    d = c.d
    out.update({"emb.w1": (6, d), "emb.b1": (d,), "emb.w2": (d, d), "emb.b2": (d,),
                "emb.proj": (cos_embed_dim(c.freq_pos, c.freq_dir), d)})
    stages = [p for p, used in (("global", c.variant == "vania"), ("ray", c.uses_ray_transformer),
                                ("pixel", c.uses_pixel_transformer)) if used]
    for prefix in stages:
        for i in range(c.layers):
            out[f"{prefix}.{i}.ln_gamma"] = (d,)
            out[f"{prefix}.{i}.ln_beta"] = (d,)
            if c.attention_mode == PROJECTED:
                for w in ("wq", "wk", "wv", "wo"):
                    out[f"{prefix}.{i}.{w}"] = (d, d)
    out["head.w"], out["head.b"] = (d, 3), (3,)
    return out


def count_madds(config: ModelConfig, n_p: int, n_r: int) -> Dict[str, int]:
    """Attention score + value multiply-adds per stage at the given sizes.

    A sequence of ``n`` tokens of width ``d`` costs ``n*n*d`` for the scores and
    ``n*n*d`` for the weighted values, per layer, summed over heads.
    """
    d, layers = config.d, config.layers
    tokens = n_p * n_r
    return {
        "global": 2 * layers * tokens * tokens * d,
        "ray": 2 * layers * n_p * n_r * n_r * d,
        "pixel": 2 * layers * n_p * n_p * d,
    }


def stages_for(variant: str) -> tuple:
    return {
        "vania": ("global",),
        "nerfa": ("ray", "pixel"),
        "no_fm": ("ray", "pixel"),
        "no_rt": ("pixel",),
        "no_pt": ("ray",),
        "nerf": (),
    }[variant]
