"""Dense float32 tensors and seeded random streams.

Tensors are plain C-ordered ``numpy.float32`` arrays: element order is
"last axis fastest", which is also the order used by the weight file format.
Everything random in the package goes through an :class:`RngStream`, a PCG64
generator keyed by ``(root_seed, label)`` so that e.g. dropout masks and
augmentation draws never perturb each other.
"""

from __future__ import annotations

import hashlib
import math
import struct
from typing import Sequence

import numpy as np

from .errors import InvalidRange, ShapeMismatch

DTYPE = np.float32

# Fixed ids; part of the reproducibility contract, never renumber.
STREAM_LABELS = {"init": 1, "dropout": 2, "augment": 3, "shuffle": 4, "synth": 5}

_U64 = (1 << 64) - 1


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(n) for n in shape)
    if not shape or any(n < 1 for n in shape):
        raise ShapeMismatch(f"extents must be >= 1, got {shape}")
    return shape


def tensor_create(shape: Sequence[int], values) -> np.ndarray:
    shape = _check_shape(shape)
    flat = np.asarray(values, dtype=DTYPE).reshape(-1)
    if flat.size != math.prod(shape):
        raise ShapeMismatch(f"{flat.size} values do not fill shape {shape}")
    return np.ascontiguousarray(flat.reshape(shape))


def tensor_reshape(t: np.ndarray, new_shape: Sequence[int]) -> np.ndarray:
    new_shape = _check_shape(new_shape)
    if math.prod(new_shape) != t.size:
        raise ShapeMismatch(f"cannot reshape {t.shape} to {new_shape}")
    return np.ascontiguousarray(t).reshape(new_shape)


def offset_of(shape: Sequence[int], index: Sequence[int]) -> int:
    """Linear offset of ``index`` in canonical (row-major) order."""
    if len(index) != len(shape):
        raise ShapeMismatch(f"index {tuple(index)} has wrong rank for {tuple(shape)}")
    offset = 0
    for i, n in zip(index, shape):
        if not 0 <= i < n:
            raise ShapeMismatch(f"index {tuple(index)} out of bounds for {tuple(shape)}")
        offset = offset * n + i
    return offset


def index_of(shape: Sequence[int], offset: int) -> tuple[int, ...]:
    if not 0 <= offset < math.prod(shape):
        raise ShapeMismatch(f"offset {offset} out of bounds for {tuple(shape)}")
    index = []
    for n in reversed(shape):
        offset, i = divmod(offset, n)
        index.append(i)
    return tuple(reversed(index))


def hash64(*values: int) -> int:
    """Stable 64-bit hash of a tuple of integers (used to derive child seeds)."""
    payload = b"".join(struct.pack("<Q", int(v) & _U64) for v in values)
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


class RngStream:
    """PCG64 stream identified by a root seed, a purpose label and an optional child path.

    Distinct labels (and child paths) map to distinct ``SeedSequence`` spawn
    keys, hence to distinct PCG64 states and increments.
    """

    def __init__(self, root_seed: int, label: str, child: Sequence[int] = ()):
        if label not in STREAM_LABELS:
            raise ValueError(f"unknown stream label {label!r}")
        self.root_seed = int(root_seed) & _U64
        self.label = label
        self.child = tuple(int(c) for c in child)
        seq = np.random.SeedSequence(
            entropy=self.root_seed, spawn_key=(STREAM_LABELS[label], *self.child)
        )
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def __repr__(self):
        return f"RngStream(root_seed={self.root_seed}, label={self.label!r}, child={self.child})"

    def spawn(self, *child: int) -> "RngStream":
        return RngStream(self.root_seed, self.label, self.child + tuple(child))

    def uniform01(self, size=None):
        return self.generator.random(size)

    def normal01(self, size=None):
        return self.generator.standard_normal(size)

    def permutation(self, n: int) -> np.ndarray:
        if n < 0:
            raise InvalidRange(f"permutation size must be >= 0, got {n}")
        return self.generator.permutation(n)

    def int_range(self, a: int, b: int, size=None):
        """Uniform integers in the closed range ``[a, b]``."""
        if a > b:
            raise InvalidRange(f"empty integer range [{a}, {b}]")
        return self.generator.integers(a, b, size=size, endpoint=True)


def rng_draw(stream: RngStream, kind: str, *args, size=None):
    """Dispatch helper: ``kind`` is uniform01, normal01, permutation or int_range."""
    if kind == "uniform01":
        return stream.uniform01(size)
    if kind == "normal01":
        return stream.normal01(size)
    if kind == "permutation":
        return stream.permutation(*args)
    if kind == "int_range":
        return stream.int_range(*args, size=size)
    raise ValueError(f"unknown draw kind {kind!r}")
