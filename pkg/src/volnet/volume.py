"""CT volumes, the RV1 file format and the preprocessing chain.

Voxel grids are held as numpy arrays indexed ``[x, y, z]`` (x, y transverse,
z longitudinal).  On disk an RV1 volume is a JSON header ``<stem>.json`` next
to a raw little-endian payload ``<stem>.raw`` in x-fastest order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CenterOutside, DegenerateAxis, FormatError, ShapeMismatch, SizeMismatch

HU_LOW = -250
HU_HIGH = 250
PATCH_EXTENT = (112, 112, 48)
CHANNELS_PER_FRAME = 3

_DTYPES = {"i16": np.dtype("<i2"), "u8": np.dtype("u1")}


@dataclass
class CtVolume:
    voxels: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise ShapeMismatch(f"volume must be 3D, got shape {self.voxels.shape}")
        if self.voxels.dtype not in (np.int16, np.uint8):
            raise FormatError(f"unsupported voxel dtype {self.voxels.dtype}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.origin_mm = tuple(float(o) for o in self.origin_mm)
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise FormatError(f"spacing must be 3 positive values, got {self.spacing_mm}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def dtype(self) -> str:
        return "u8" if self.voxels.dtype == np.uint8 else "i16"

    def voxel_index(self, point_mm) -> tuple[int, int, int]:
        """Nearest voxel to a physical point; exact halves snap to the lower index."""
        return tuple(
            math.ceil((p - o) / s - 0.5)
            for p, o, s in zip(point_mm, self.origin_mm, self.spacing_mm)
        )

    def point_mm(self, index) -> tuple[float, float, float]:
        return tuple(o + i * s for i, o, s in zip(index, self.origin_mm, self.spacing_mm))


@dataclass
class Patch:
    values: np.ndarray
    source_center_mm: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))

    @property
    def extent(self):
        return self.values.shape


def _payload_path(header_path: Path) -> Path:
    return header_path.with_suffix(".raw")


def save_volume(v: CtVolume, path) -> None:
    path = Path(path)
    header = {
        "magic": "RV1",
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing_mm),
        "origin_mm": list(v.origin_mm),
        "dtype": v.dtype,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(header) + "\n", encoding="utf-8")
    payload = v.voxels.astype(_DTYPES[v.dtype], copy=False).ravel(order="F")
    _payload_path(path).write_bytes(payload.tobytes())


def load_volume(path) -> CtVolume:
    path = Path(path)
    try:
        header = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: header is not valid JSON: {exc}") from None
    if not isinstance(header, dict) or header.get("magic") != "RV1":
        raise FormatError(f"{path}: missing RV1 magic")
    try:
        dims = [int(n) for n in header["dims"]]
        spacing = [float(s) for s in header["spacing_mm"]]
        origin = [float(o) for o in header["origin_mm"]]
        dtype = _DTYPES[header["dtype"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad header field: {exc}") from None
    if len(dims) != 3 or any(n < 1 for n in dims):
        raise FormatError(f"{path}: dims must be 3 positive extents, got {dims}")
    if len(spacing) != 3 or len(origin) != 3:
        raise FormatError(f"{path}: spacing_mm and origin_mm need 3 components")
    raw = _payload_path(path).read_bytes()
    expected = math.prod(dims) * dtype.itemsize
    if len(raw) != expected:
        raise SizeMismatch(f"{path}: payload has {len(raw)} bytes, expected {expected}")
    voxels = np.frombuffer(raw, dtype=dtype).reshape(dims, order="F")
    return CtVolume(np.array(voxels, dtype=dtype.newbyteorder("=")), tuple(spacing), tuple(origin))


def _output_dim(n: int, spacing: float, target: float) -> int:
    return math.floor((n - 1) * spacing / target + 1e-9) + 1


def _interp_axis(a: np.ndarray, axis: int, spacing: float, target: float) -> np.ndarray:
    n = a.shape[axis]
    m = _output_dim(n, spacing, target)
    pos = np.arange(m, dtype=np.float64) * (target / spacing)
    lo = np.minimum(np.floor(pos).astype(np.intp), n - 2)
    frac = np.clip(pos - lo, 0.0, 1.0)
    shape = [1] * a.ndim
    shape[axis] = m
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - frac) + np.take(a, lo + 1, axis=axis) * frac


def resample_isotropic(v: CtVolume, target_mm: float = 1.0) -> CtVolume:
    """Trilinear resampling onto an isotropic grid anchored at the volume origin.

    Output extent per axis is ``floor((n - 1) * s / t) + 1`` so the last sample
    stays inside the physical extent; axes already at the target spacing are
    copied untouched.
    """
    if v.dtype != "i16":
        raise FormatError("resampling expects an i16 HU volume")
    if target_mm <= 0:
        raise ValueError(f"target spacing must be positive, got {target_mm}")
    for n, s in zip(v.dims, v.spacing_mm):
        if n < 2 and s != target_mm:
            raise DegenerateAxis(f"axis with {n} voxel(s) cannot be resampled from {s} mm")
    out = v.voxels.astype(np.float64)
    for axis, s in enumerate(v.spacing_mm):
        if s != target_mm:
            out = _interp_axis(out, axis, s, target_mm)
    out = np.floor(out + 0.5).astype(np.int16)
    return CtVolume(out, (target_mm,) * 3, v.origin_mm)


def window_rescale_values(hu) -> np.ndarray:
    # Integer form of round_half_up((clamp(h) + 250) * 255 / 500).
    h = np.clip(np.asarray(hu, dtype=np.int64), HU_LOW, HU_HIGH) - HU_LOW
    return ((2 * 255 * h + (HU_HIGH - HU_LOW)) // (2 * (HU_HIGH - HU_LOW))).astype(np.uint8)


def window_rescale(v: CtVolume) -> CtVolume:
    if v.dtype != "i16":
        raise FormatError("window rescaling expects an i16 HU volume")
    return CtVolume(window_rescale_values(v.voxels), v.spacing_mm, v.origin_mm)


def crop_at(v: CtVolume, center_mm, offset_vox=(0, 0), extent=PATCH_EXTENT) -> Patch:
    """Cut an ``extent`` block around the voxel nearest ``center_mm``.

    The block spans ``[c - e // 2, c - e // 2 + e)`` per axis, with the transverse
    center moved by ``offset_vox``.  Voxels outside the volume are zero.
    """
    if v.dtype != "u8":
        raise FormatError("cropping expects a window-rescaled u8 volume")
    center = v.voxel_index(center_mm)
    if any(not 0 <= c < n for c, n in zip(center, v.dims)):
        raise CenterOutside(f"center {tuple(center_mm)} mm maps to voxel {center} outside {v.dims}")
    dx, dy = offset_vox
    center = (center[0] + int(dx), center[1] + int(dy), center[2])
    out = np.zeros(extent, dtype=np.uint8)
    src, dst = [], []
    for c, e, n in zip(center, extent, v.dims):
        start = c - e // 2
        lo, hi = max(start, 0), min(start + e, n)
        if lo >= hi:
            return Patch(out, tuple(center_mm))
        src.append(slice(lo, hi))
        dst.append(slice(lo - start, hi - start))
    out[tuple(dst)] = v.voxels[tuple(src)]
    return Patch(out, tuple(center_mm))


def _check_depth(values: np.ndarray):
    if values.ndim != 3 or values.shape[2] % CHANNELS_PER_FRAME:
        raise ShapeMismatch(f"patch depth must be a multiple of 3, got shape {values.shape}")


def rearrange_frames(p: Patch | np.ndarray) -> np.ndarray:
    """(X, Y, Z) patch -> (Z/3, X, Y, 3) frames; slice z lands in frame z // 3, channel z % 3."""
    values = p.values if isinstance(p, Patch) else p
    _check_depth(values)
    nx, ny, nz = values.shape
    return np.ascontiguousarray(
        values.reshape(nx, ny, nz // 3, 3).transpose(2, 0, 1, 3)
    )


def unrearrange_frames(frames: np.ndarray) -> np.ndarray:
    nf, nx, ny, nc = frames.shape
    return np.ascontiguousarray(frames.transpose(1, 2, 0, 3).reshape(nx, ny, nf * nc))


def slice_stack(p: Patch | np.ndarray) -> list[np.ndarray]:
    """Split a patch into (X, Y, 3) slices; slice k holds z = 3k, 3k+1, 3k+2."""
    values = p.values if isinstance(p, Patch) else p
    _check_depth(values)
    return [np.ascontiguousarray(values[:, :, 3 * k : 3 * k + 3]) for k in range(values.shape[2] // 3)]
