"""Training-time augmentation: transverse flips, quarter-turn rotations and center shifts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import RngStream
from .volume import PATCH_EXTENT, CtVolume, Patch, crop_at

MAX_SHIFT = 7


@dataclass(frozen=True)
class AugmentationSpec:
    flip_sagittal: bool = False
    flip_coronal: bool = False
    rot_quarter_turns: int = 0
    shift_vox: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.rot_quarter_turns not in (0, 1, 2, 3):
            raise ValueError(f"rot_quarter_turns must be in 0..3, got {self.rot_quarter_turns}")
        if any(abs(s) > MAX_SHIFT for s in self.shift_vox):
            raise ValueError(f"shift must lie in [-{MAX_SHIFT}, {MAX_SHIFT}], got {self.shift_vox}")


IDENTITY = AugmentationSpec()


def sample_spec(rng: RngStream) -> AugmentationSpec:
    # Draw order is part of the reproducibility contract.
    flips = rng.uniform01(2) < 0.5
    turns = int(rng.int_range(0, 3))
    dx, dy = (int(s) for s in rng.int_range(-MAX_SHIFT, MAX_SHIFT, size=2))
    return AugmentationSpec(bool(flips[0]), bool(flips[1]), turns, (dx, dy))


def transform(values: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    """Flips, then rotation, in the transverse (x, y) plane of an (X, Y, Z) array."""
    out = values
    if spec.flip_sagittal:
        out = out[::-1, :, :]
    if spec.flip_coronal:
        out = out[:, ::-1, :]
    if spec.rot_quarter_turns:
        out = np.rot90(out, spec.rot_quarter_turns, axes=(0, 1))
    return np.ascontiguousarray(out)


def apply(spec: AugmentationSpec, v: CtVolume, center_mm, extent=PATCH_EXTENT) -> Patch:
    patch = crop_at(v, center_mm, spec.shift_vox, extent)
    return Patch(transform(patch.values, spec), patch.source_center_mm)
