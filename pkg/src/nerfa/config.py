"""Flat ``key = value`` run configuration.

Recognized keys (anything else is an error)::

    variant, d, heads, layers, freq_pos, freq_dir, attention_mode, seed    model
    n_p, n_r, lr0, decay, iterations, near, far, eval_every                training
    image_size, n_views, scene_seed                                        toy scene

Lines starting with ``#`` and blank lines are ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .model import ModelConfig
from .scene import ToySceneConfig
from .train import TrainConfig


class ConfigKeyError(ValueError):
    """A config line is malformed or names an unknown key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


@dataclass
class RunConfig:
    # model; defaults are the full single-scene setting
    variant: str = "nerfa"
    d: int = 64
    heads: int = 8
    layers: int = 1
    freq_pos: int = 10
    freq_dir: int = 4
    attention_mode: str = "projected"
    seed: int = 0
    # training
    n_p: int = 128
    n_r: int = 64
    lr0: float = 5e-4
    decay: float = 5e-5
    iterations: int = 2000
    near: float = 2.0
    far: float = 6.0
    eval_every: int = 100
    # toy scene
    image_size: int = 16
    n_views: int = 8
    scene_seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(variant=self.variant, d=self.d, heads=self.heads, layers=self.layers,
                           freq_pos=self.freq_pos, freq_dir=self.freq_dir,
                           attention_mode=self.attention_mode, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(n_p=self.n_p, n_r=self.n_r, lr0=self.lr0, decay=self.decay,
                           iterations=self.iterations, seed=self.seed, near=self.near,
                           far=self.far, eval_every=self.eval_every)

    def toy_config(self) -> ToySceneConfig:
        return ToySceneConfig(image_size=self.image_size, n_views=self.n_views,
                              near=self.near, far=self.far)

    def validate(self) -> "RunConfig":
        self.model_config()
        self.train_config()
        return self

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {v!r}\n" if isinstance(v, float) else f"{f.name} = {v}\n")
        return "".join(lines)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigKeyError(key, f"cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigKeyError(line, f"line {lineno} is not of the form key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigKeyError(key, "unknown key")
        if key in values:
            raise ConfigKeyError(key, "given twice")
        values[key] = _convert(key, raw)
    cfg = RunConfig(**values)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigKeyError("<values>", str(exc)) from exc
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())
