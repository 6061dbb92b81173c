"""NNW1 weight files.

Layout (all little-endian)::

    b"NNW1" | u32 version=1 | u32 len + utf-8 config name | u32 tensor count
    per tensor: u16 len + utf-8 name | u8 rank | rank x u64 dims | prod(dims) x f32
"""

from __future__ import annotations

import math
import os
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import FormatError, ShapeMismatch
from ..tensor import DTYPE, RngStream
from .model import Model, ModelConfig, init_params, param_shapes

MAGIC = b"NNW1"
VERSION = 1


def write_tensors(path, config_name: str, tensors: dict[str, np.ndarray]) -> None:
    """Write ``tensors`` atomically (temp file + rename)."""
    path = Path(path)
    parts = [MAGIC, struct.pack("<I", VERSION)]
    name_bytes = config_name.encode("utf-8")
    parts += [struct.pack("<I", len(name_bytes)), name_bytes, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        key = name.encode("utf-8")
        parts += [struct.pack("<H", len(key)), key, struct.pack("<B", value.ndim)]
        parts += [struct.pack("<Q", n) for n in value.shape]
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_tensors(path) -> tuple[str, dict[str, np.ndarray]]:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not an NNW1 file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported NNW1 version {version}")
    (n,) = r.unpack("<I")
    try:
        config_name = r.take(n).decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: config name is not UTF-8") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}Q")
        values = np.frombuffer(r.take(4 * math.prod(dims)), dtype="<f4")
        if name in tensors:
            raise FormatError(f"{path}: tensor {name!r} stored twice")
        tensors[name] = values.astype(DTYPE).reshape(dims)
    if r.pos != len(r.data):
        raise FormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return config_name, tensors


def weights_save(model: Model, path) -> None:
    write_tensors(path, model.config.name, model.params)


def weights_load(path, config: ModelConfig, rng: Optional[RngStream] = None) -> Model:
    """Load a model for ``config``; tensors missing from the file are freshly initialised.

    The freeze mask always comes from ``config``.  Stored tensors must carry a
    name and shape produced by the config's shape propagation.
    """
    _, stored = read_tensors(path)
    expected = param_shapes(config)
    for name, value in stored.items():
        if name not in expected:
            raise ShapeMismatch(f"tensor {name!r} is not a parameter of {config.name}")
        if value.shape != expected[name]:
            raise ShapeMismatch(f"tensor {name!r}: stored shape {value.shape}, {config.name} expects {expected[name]}")
    if len(stored) == len(expected):
        params = {name: stored[name] for name in expected}
    else:
        fresh = init_params(config, rng or RngStream(0, "init"))
        params = {name: stored.get(name, fresh.params[name]) for name in expected}
    return Model(config, params)
