"""Central finite-difference checks of every differentiable operation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import autograd as ag
from .attention import LITERAL, PROJECTED, AttentionParams, BlockParams, self_attention, transformer_block
from .autograd import Tensor, backward, no_grad
from .embedding import EmbedderParams, embed
from .model import ABLATION_VARIANTS, ModelConfig, NeRFAModel, SigmaColorField, feature_modulation, nerf_render
from .rays import Camera, generate_rays, look_at, sample_ray_points
from .train import l2_loss

STEP = 1e-6
TOLERANCE = 1e-4


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    n_params: int

    @property
    def passed(self) -> bool:
        return self.rel_error < TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(fn: Callable[[], Tensor], leaf: Tensor, h: float = STEP) -> np.ndarray:
    grad = np.zeros_like(leaf.data)
    flat, g = leaf.data.reshape(-1), grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            g[i] = (up - down) / (2 * h)
    return grad


def check(name: str, fn: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = STEP) -> GradCheckResult:
    """Compare autograd and finite-difference gradients of scalar ``fn()`` for ``leaves``."""
    for t in leaves:
        t.grad = None
    backward(fn())
    analytic = np.concatenate([t.grad.ravel() for t in leaves])
    numeric = np.concatenate([numeric_grad(fn, t, h).ravel() for t in leaves])
    return GradCheckResult(name, relative_error(analytic, numeric), analytic.size)


def _leaf(rng: np.random.Generator, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _away_from(rng, shape, points: Sequence[float], margin: float = 1e-3) -> Tensor:
    x = rng.uniform(-1, 1, size=shape)
    for p in points:
        close = np.abs(x - p) < margin
        x[close] += 2 * margin
    return Tensor(x, requires_grad=True)


def _reduce(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    """Random linear functional, so every output element gets a distinct weight."""
    w = Tensor(rng.uniform(-1, 1, size=shape))
    return lambda out: (out * w).sum()


def tiny_batch(n_p: int = 2, n_r: int = 3, seed: int = 0):
    cam = Camera(look_at([0.3, 0.2, 4.0]), 8.0, 8, 8)
    pix = np.random.default_rng(seed).choice(64, size=n_p, replace=False)
    rays = generate_rays(cam, np.stack([pix // 8, pix % 8], axis=-1))
    return sample_ray_points(rays, 2.0, 6.0, n_r, "stratified", seed=seed)


def op_checks(seed: int = 0) -> List[GradCheckResult]:
    rng = np.random.default_rng(seed)
    out: List[GradCheckResult] = []

    def run(name, fn, leaves):
        out.append(check(name, fn, leaves))

    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4,))
    r34 = _reduce(rng, (3, 4))
    run("add", lambda: r34(a + b), [a, b])
    run("multiply", lambda: r34(a * b), [a, b])
    run("negate", lambda: r34(-a), [a])
    run("exp", lambda: r34(ag.exp(a)), [a])
    run("sigmoid", lambda: r34(ag.sigmoid(a)), [a])
    run("square", lambda: r34(ag.square(a)), [a])
    k = _away_from(rng, (3, 4), [0.0])
    run("relu", lambda: r34(ag.relu(k)), [k])
    c = _away_from(rng, (3, 4), [-0.5, 0.5])
    run("clamp", lambda: r34(ag.clamp(c, -0.5, 0.5)), [c])

    x = _leaf(rng, (2, 3, 4))
    r234 = _reduce(rng, (2, 3, 4))
    r24 = _reduce(rng, (2, 4))
    run("sum_along_axis", lambda: r24(x.sum(axis=1)), [x])
    run("mean_along_axis", lambda: r24(x.mean(axis=1)), [x])
    run("cumulative_sum", lambda: r234(ag.cumulative_sum(x, axis=1)), [x])
    run("cumulative_sum_exclusive", lambda: r234(ag.cumulative_sum(x, axis=1, exclusive=True)), [x])
    run("softmax", lambda: r234(ag.softmax(x, axis=-1)), [x])
    run("softmax_axis1", lambda: r234(ag.softmax(x, axis=1)), [x])
    g, be = _leaf(rng, (4,)), _leaf(rng, (4,))
    run("layer_norm", lambda: r234(ag.layer_norm(x, g, be)), [x, g, be])
    w = _leaf(rng, (4, 5))
    run("matmul", lambda: _reduce(np.random.default_rng(1), (3, 5))(a @ w), [a, w])
    run("matmul_batched", lambda: _reduce(np.random.default_rng(2), (2, 3, 5))(x @ w), [x, w])
    run("reshape", lambda: _reduce(np.random.default_rng(3), (6, 4))(x.reshape(6, 4)), [x])
    run("swapaxes", lambda: _reduce(np.random.default_rng(4), (4, 3, 2))(x.swapaxes(0, 2)), [x])
    run("index", lambda: _reduce(np.random.default_rng(5), (2, 3, 2))(x[..., 1:3]), [x])

    # model building blocks
    d, n = 4, 3
    tok = _leaf(rng, (n, d))
    rnd = _reduce(rng, (n, d))
    run("self_attention_literal", lambda: rnd(self_attention(tok, AttentionParams(LITERAL, 1))), [tok])
    ap = AttentionParams.init(d, 2, rng, PROJECTED)
    run("self_attention_projected", lambda: rnd(self_attention(tok, ap)),
        [tok, ap.wq, ap.wk, ap.wv, ap.wo])
    bp = BlockParams.init(d, 2, 2, rng, PROJECTED)
    run("transformer_block", lambda: rnd(transformer_block(tok, bp)), [tok] + list(bp.tensors().values()))

    batch = tiny_batch()
    ep = EmbedderParams.init(d, 2, 1, rng)
    r_emb = _reduce(rng, (2, 3, d))
    run("embed", lambda: r_emb(embed(batch.points, ep)), list(ep.tensors().values()))

    feats = _leaf(rng, (2, 3, d))
    run("feature_modulation", lambda: _reduce(np.random.default_rng(6), (2, d))(
        feature_modulation(feats, batch.deltas)), [feats])
    sig = _leaf(rng, (2, 3), 0.1, 2.0)
    col = _leaf(rng, (2, 3, 3), 0.0, 1.0)
    run("nerf_render", lambda: _reduce(np.random.default_rng(7), (2, 3))(
        nerf_render(SigmaColorField(sig, col, batch.deltas))), [sig, col])
    pred = _leaf(rng, (2, 3), 0.0, 1.0)
    gt = rng.uniform(0, 1, size=(2, 3))
    run("l2_loss", lambda: l2_loss(pred, gt), [pred])
    return out


def model_checks(seed: int = 0, variants: Sequence[str] = ABLATION_VARIANTS) -> List[GradCheckResult]:
    """End-to-end gradients at N_p=2, N_r=3, d=4, H=2 for every parameter group."""
    batch = tiny_batch(2, 3, seed)
    target = np.random.default_rng(seed + 1).uniform(0, 1, size=(2, 3))
    out = []
    for v in variants:
        model = NeRFAModel(ModelConfig(variant=v, d=4, heads=2, layers=1, freq_pos=2, freq_dir=1, seed=seed))
        groups: Dict[str, List[Tensor]] = {}
        for name, t in model.parameters().items():
            groups.setdefault(name.split(".")[0], []).append(t)
        for group, leaves in groups.items():
            out.append(check(f"forward[{v}]:{group}", lambda: l2_loss(model(batch), target), leaves))
    return out


def run_all(seed: int = 0) -> List[GradCheckResult]:
    return op_checks(seed) + model_checks(seed)


def format_results(results: Sequence[GradCheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  {'rel_error':>10}  {'params':>6}  result"]
    for r in results:
        err = "nan" if math.isnan(r.rel_error) else f"{r.rel_error:.2e}"
        lines.append(f"{r.name.ljust(width)}  {err:>10}  {r.n_params:>6}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
