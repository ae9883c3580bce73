"""Binary checkpoints and image files.

Checkpoint layout (all integers little-endian)::

    b"NRFA"  | u32 version | u32 config length | config text (utf-8)
    u64 training step | u32 section count
    per section: u32 name length | name (utf-8) | u64 element count | float64 LE data

Model parameters are sections named after the parameter; optimizer moments
are ``adam.m/<param>`` and ``adam.v/<param>``.
"""

from __future__ import annotations

import io
import math
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from PIL import Image as PILImage

from .config import ConfigKeyError, RunConfig, parse_config
from .model import NeRFAModel, parameter_shapes
from .train import AdamState

MAGIC = b"NRFA"
VERSION = 1
_M, _V = "adam.m/", "adam.v/"


class FormatError(ValueError):
    """A checkpoint file is malformed; the message names the offending field."""


@dataclass
class Checkpoint:
    config: RunConfig
    model: NeRFAModel
    step: int
    optimizer: Optional[AdamState] = None


def atomic_write(path: str, data: bytes) -> None:
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(model: NeRFAModel, config: RunConfig,
                      optimizer: Optional[AdamState] = None, step: int = 0) -> bytes:
    sections: Dict[str, np.ndarray] = {k: t.data for k, t in model.parameters().items()}
    if optimizer is not None:
        step = optimizer.step
        for k in model.parameters():
            if k in optimizer.m:
                sections[_M + k] = optimizer.m[k]
                sections[_V + k] = optimizer.v[k]
    text = config.dumps().encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text,
             struct.pack("<QI", step, len(sections))]
    for name, arr in sections.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", arr.size))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path: str, model: NeRFAModel, config: RunConfig,
                    optimizer: Optional[AdamState] = None, step: int = 0) -> None:
    atomic_write(path, encode_checkpoint(model, config, optimizer, step))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic: not an NRFA checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} (expected {VERSION})")
    (clen,) = r.unpack("<I", "config length")
    try:
        config = parse_config(r.take(clen, "config text").decode())
    except (UnicodeDecodeError, ConfigKeyError) as exc:
        raise FormatError(f"invalid config text: {exc}") from None
    step, count = r.unpack("<QI", "step and section count")
    raw: Dict[str, bytes] = {}
    for i in range(count):
        (nlen,) = r.unpack("<I", f"section {i} name length")
        try:
            name = r.take(nlen, f"section {i} name").decode()
        except UnicodeDecodeError:
            raise FormatError(f"section {i} name is not utf-8") from None
        (n,) = r.unpack("<Q", f"section {name!r} element count")
        if name in raw:
            raise FormatError(f"duplicate section {name!r}")
        raw[name] = r.take(8 * n, f"section {name!r} data")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last section")

    # every section is validated against the config before a model is built
    expected = _expected_sizes(config)
    has_opt = any(k.startswith(_M) for k in raw)
    for name, size in expected.items():
        names = [name] + ([_M + name, _V + name] if has_opt else [])
        for key in names:
            if key not in raw:
                raise FormatError(f"missing section {key!r}")
            if len(raw[key]) != 8 * size:
                raise FormatError(f"section {key!r} length {len(raw[key]) // 8} != expected {size}")
    known = set(expected) | ({_M + k for k in expected} | {_V + k for k in expected} if has_opt else set())
    extra = sorted(set(raw) - known)
    if extra:
        raise FormatError(f"unexpected section {extra[0]!r}")

    model = NeRFAModel(config.model_config())
    for name, t in model.parameters().items():
        t.data = np.frombuffer(raw[name], dtype="<f8").astype(np.float64).reshape(t.shape)
    opt = None
    if has_opt:
        opt = AdamState(step=step)
        for name, t in model.parameters().items():
            opt.m[name] = np.frombuffer(raw[_M + name], dtype="<f8").astype(np.float64).reshape(t.shape)
            opt.v[name] = np.frombuffer(raw[_V + name], dtype="<f8").astype(np.float64).reshape(t.shape)
    return Checkpoint(config, model, step, opt)


def _expected_sizes(config: RunConfig) -> Dict[str, int]:
    return {k: math.prod(shape) for k, shape in parameter_shapes(config.model_config()).items()}


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# images


def quantize(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to bytes with round-half-up."""
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_image(img: np.ndarray, path: str) -> None:
    """Write an 8-bit RGB PNG atomically."""
    buf = io.BytesIO()
    PILImage.fromarray(quantize(img)).save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def read_image(path: str) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
