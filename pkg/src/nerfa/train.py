"""L2 training with Adam and exponential learning-rate decay, plus evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autograd import ShapeError, Tensor, as_tensor, backward, no_grad, square, sum_along_axis
from .metrics import mse_to_psnr, psnr, ssim
from .model import NeRFAModel
from .rays import Camera, generate_rays, sample_ray_points
from .scene import Scene, View

logger = logging.getLogger(__name__)

RENDER_ORDER_SEED = 0


class NumericalError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    n_p: int = 64
    n_r: int = 16
    lr0: float = 5e-4
    decay: float = 5e-5
    iterations: int = 2000
    seed: int = 0
    near: float = 2.0
    far: float = 6.0
    eval_every: int = 100

    def __post_init__(self):
        if self.n_p < 1 or self.n_r < 1:
            raise ValueError("n_p and n_r must be >= 1")
        if not self.lr0 > 0 or self.decay < 0:
            raise ValueError("need lr0 > 0 and decay >= 0")
        if self.iterations < 0 or self.eval_every < 1:
            raise ValueError("need iterations >= 0 and eval_every >= 1")


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class LogRecord:
    step: int
    loss: float
    lr: float
    psnr: float


@dataclass
class TrainLog:
    records: List[LogRecord] = field(default_factory=list)

    def append(self, rec: LogRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError(f"log steps must increase: {rec.step} after {self.records[-1].step}")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "lr", "psnr"])
        for r in self.records:
            w.writerow([r.step, repr(r.loss), repr(r.lr), repr(r.psnr)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["step", "loss", "lr", "psnr"]:
            raise ValueError("missing TrainLog header")
        log = cls()
        for row in rows[1:]:
            log.append(LogRecord(int(row[0]), float(row[1]), float(row[2]), float(row[3])))
        return log


def l2_loss(pred: Tensor, target) -> Tensor:
    """Mean over rays of the squared error summed over color channels."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l2_loss: {pred.shape} vs {target.shape}")
    return sum_along_axis(square(pred - target), axis=-1).mean()


def lr_schedule(lr0: float, decay: float, step: int) -> float:
    return lr0 * math.exp(-decay * step)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def render_view(model: NeRFAModel, camera: Camera, near: float, far: float, n_r: int,
                chunk: int) -> np.ndarray:
    """Render a full image in pixel chunks of size ``chunk`` using midpoint samples.

    Pixels are grouped by a fixed shuffle so each chunk resembles a training batch.
    """
    pixels = camera.all_pixels()
    order = np.random.default_rng(RENDER_ORDER_SEED).permutation(len(pixels))
    out = np.empty((len(pixels), 3))
    with no_grad():
        for start in range(0, len(pixels), chunk):
            idx = order[start:start + chunk]
            rays = generate_rays(camera, pixels[idx])
            batch = sample_ray_points(rays, near, far, n_r, "midpoint")
            out[idx] = model(batch).data
    return out.reshape(camera.height, camera.width, 3)


def evaluate(model: NeRFAModel, views: Sequence[View], near: float, far: float, n_r: int,
             chunk: int) -> List[dict]:
    rows = []
    for i, view in enumerate(views):
        img = render_view(model, view.camera, near, far, n_r, chunk)
        rows.append({"view": i, "split": view.split, "psnr": psnr(img, view.image),
                     "ssim": ssim(img, view.image)})
    return rows


def train_psnr(model: NeRFAModel, scene: Scene, config: TrainConfig) -> float:
    """PSNR of the pooled squared error over all train views."""
    errs = []
    for view in scene.split("train"):
        img = render_view(model, view.camera, config.near, config.far, config.n_r, config.n_p)
        errs.append(np.mean((img - view.image) ** 2))
    return mse_to_psnr(float(np.mean(errs)))


def train(model: NeRFAModel, scene: Scene, config: TrainConfig,
          state: Optional[AdamState] = None, log: Optional[TrainLog] = None,
          stop_at: Optional[int] = None):
    """Optimize ``model`` on the train views of ``scene``.

    Each step draws its view, pixels and depth jitter from a generator seeded
    by ``(seed, step)``, so a run resumed from ``state`` continues identically.
    Runs until ``stop_at`` (default ``config.iterations``). Returns
    ``(model, log, state)``.
    """
    state = state or AdamState()
    log = log or TrainLog()
    views = scene.split("train")
    h, w = scene.image_shape[:2]
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    params = model.parameters()
    n_p = min(config.n_p, h * w)
    for step in range(state.step, end):
        rng = _step_rng(config.seed, step)
        view = views[int(rng.integers(len(views)))]
        flat = rng.choice(h * w, size=n_p, replace=False)
        pixels = np.stack([flat // w, flat % w], axis=-1)
        rays = generate_rays(view.camera, pixels)
        batch = sample_ray_points(rays, config.near, config.far, config.n_r, "stratified", rng=rng)
        target = view.image[pixels[:, 0], pixels[:, 1]]

        model.zero_grad()
        loss = l2_loss(model(batch), target)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss {value} at step {step}")
        backward(loss)
        lr = lr_schedule(config.lr0, config.decay, step)
        adam_step(params, {k: p.grad for k, p in params.items()}, state, lr)

        done = step + 1
        if done % config.eval_every == 0 or done == config.iterations:
            rec = LogRecord(done, value, lr, train_psnr(model, scene, config))
            log.append(rec)
            logger.info("step %d loss %.6f lr %.3e psnr %.2f", rec.step, rec.loss, rec.lr, rec.psnr)
    return model, log, state
