import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volnet.augment import IDENTITY, AugmentationSpec, apply, sample_spec, transform
from volnet.tensor import RngStream
from volnet.volume import CtVolume, crop_at


def patch(seed=0, shape=(8, 8, 4)):
    return np.random.default_rng(seed).integers(0, 256, size=shape).astype(np.uint8)


def test_sample_frequencies():
    rng = RngStream(0, "augment")
    specs = [sample_spec(rng) for _ in range(20000)]
    turns = np.bincount([s.rot_quarter_turns for s in specs], minlength=4) / len(specs)
    np.testing.assert_allclose(turns, 0.25, atol=0.01)
    assert abs(np.mean([s.flip_sagittal for s in specs]) - 0.5) < 0.015
    assert abs(np.mean([s.flip_coronal for s in specs]) - 0.5) < 0.015
    shifts = np.array([s.shift_vox for s in specs])
    assert shifts.min() == -7 and shifts.max() == 7
    assert set(np.unique(shifts[:, 0])) == set(range(-7, 8))


def test_sampling_reproducible():
    a = [sample_spec(RngStream(3, "augment")) for _ in range(1)]
    b = [sample_spec(RngStream(3, "augment")) for _ in range(1)]
    assert a == b


@pytest.mark.parametrize("kwargs", [{"rot_quarter_turns": 4}, {"shift_vox": (8, 0)}, {"shift_vox": (0, -8)}])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        AugmentationSpec(**kwargs)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_flip_involutions(seed):
    p = patch(seed)
    for spec in (AugmentationSpec(flip_sagittal=True), AugmentationSpec(flip_coronal=True)):
        assert transform(transform(p, spec), spec).tobytes() == p.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_rotation_order_four(seed):
    p = patch(seed)
    quarter = AugmentationSpec(rot_quarter_turns=1)
    out = p
    for k in range(4):
        if k:
            assert out.tobytes() != p.tobytes() or np.array_equal(np.rot90(p), p)
        out = transform(out, quarter)
    assert out.tobytes() == p.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.booleans(), st.booleans(), st.integers(0, 3))
def test_transform_preserves_multiset_and_z(seed, fs, fc, turns):
    p = patch(seed)
    out = transform(p, AugmentationSpec(fs, fc, turns))
    assert out.shape == p.shape
    np.testing.assert_array_equal(np.sort(out, axis=None), np.sort(p, axis=None))
    # each z slice stays a z slice
    for z in range(p.shape[2]):
        np.testing.assert_array_equal(np.sort(out[:, :, z], axis=None), np.sort(p[:, :, z], axis=None))


def test_rotation_direction_and_flip_axes():
    p = np.arange(4, dtype=np.uint8).reshape(2, 2, 1)
    np.testing.assert_array_equal(transform(p, AugmentationSpec(flip_sagittal=True))[:, :, 0], [[2, 3], [0, 1]])
    np.testing.assert_array_equal(transform(p, AugmentationSpec(flip_coronal=True))[:, :, 0], [[1, 0], [3, 2]])
    np.testing.assert_array_equal(transform(p, AugmentationSpec(rot_quarter_turns=1))[:, :, 0],
                                  np.rot90(p[:, :, 0]))


def test_identity_equals_plain_crop():
    v = CtVolume(patch(1, (40, 40, 20)))
    a = apply(IDENTITY, v, (20.0, 20.0, 10.0), (16, 16, 8))
    b = crop_at(v, (20.0, 20.0, 10.0), (0, 0), (16, 16, 8))
    assert a.values.tobytes() == b.values.tobytes()


def test_apply_shift_then_transform():
    v = CtVolume(patch(2, (40, 40, 20)))
    spec = AugmentationSpec(True, False, 3, (-4, 5))
    got = apply(spec, v, (20.0, 20.0, 10.0), (16, 16, 8)).values
    base = crop_at(v, (20.0, 20.0, 10.0), (-4, 5), (16, 16, 8)).values
    np.testing.assert_array_equal(got, np.rot90(base[::-1], 3, axes=(0, 1)))
