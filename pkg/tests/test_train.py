import csv

import numpy as np
import pytest

from volnet import train as T
from volnet.errors import EmptySplit
from volnet.nn.model import config_scratch3d, config_tiny, init_params
from volnet.nn.weights import read_tensors
from volnet.tensor import RngStream
from volnet.volume import Patch

SMALL = config_scratch3d(convs=(4, 4, 4, 8), dense=(8,), input_shape=(1, 16, 16, 8), scale_input=True)


def test_make_batches_training_total():
    batches = T.make_batches(675, 16, RngStream(0, "shuffle"))
    assert len(batches) == 43 and len(batches[-1]) == 3
    assert sorted(np.concatenate(batches).tolist()) == list(range(675))


def test_make_batches_small_and_seeded():
    assert len(T.make_batches(16, 16, RngStream(0, "shuffle"))) == 1
    a = T.make_batches(50, 8, RngStream(3, "shuffle"))
    b = T.make_batches(50, 8, RngStream(3, "shuffle"))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(EmptySplit):
        T.make_batches(0, 4, RngStream(0, "shuffle"))


@pytest.mark.parametrize("losses,expected", [([0.7, 0.5, 0.6], 1), ([0.5, 0.5], 0), ([0.3], 0)])
def test_best_epoch(losses, expected):
    assert T.best_epoch(losses) == expected


def test_run_seeds_distinct_and_stable():
    seeds = [T.run_seed(7, i) for i in range(10)]
    assert len(set(seeds)) == 10
    assert seeds == [T.run_seed(7, i) for i in range(10)]


def test_network_inputs_layouts():
    values = np.arange(16 * 16 * 6, dtype=np.uint8).reshape(16, 16, 6)
    vol = T.network_inputs(SMALL, Patch(values))
    assert vol.shape == (1, 1, 16, 16, 6) and vol.dtype == np.float32
    tiny2d = config_tiny(2, size=16)
    slices = T.network_inputs(tiny2d, Patch(values))
    assert slices.shape == (2, 3, 16, 16)
    np.testing.assert_array_equal(slices[1, 2], values[:, :, 5])


class FakeVolumes:
    def __getitem__(self, record):
        from volnet.volume import CtVolume
        return CtVolume(np.zeros((20, 20, 60), np.uint8))


def _records(n):
    from volnet.cohort import PatientRecord
    return [PatientRecord(f"p{i}", "C", "test", "x.json", (10.0, 10.0, 30.0), i % 2) for i in range(n)]


def test_predict_2d_means_slice_scores(monkeypatch):
    calls = []

    def fake_forward(model, batch, mode="eval", rng=None, dtype=None):
        calls.append(batch.shape)
        return np.arange(16, dtype=np.float32) / 16

    monkeypatch.setattr(T, "model_forward", fake_forward)
    model = init_params(config_tiny(2, size=8), RngStream(0, "init"))
    out = T.predict(model, _records(3), FakeVolumes())
    assert out.scores.tolist() == [0.46875] * 3
    assert out.labels.tolist() == [0, 1, 0] and out.patient_ids == ["p0", "p1", "p2"]
    # one forward per patient, covering all 16 slices
    assert calls == [(16, 3, 8, 8)] * 3


def test_predict_2d_constant_slices(monkeypatch):
    monkeypatch.setattr(T, "model_forward", lambda *a, **k: np.full(16, 0.25, np.float32))
    model = init_params(config_tiny(2, size=8), RngStream(0, "init"))
    assert T.predict(model, _records(1), FakeVolumes()).scores.tolist() == [0.25]


def test_predict_3d_one_forward_per_patient(monkeypatch):
    calls = []
    real = T.model_forward

    def counting(model, batch, *a, **k):
        calls.append(batch.shape)
        return real(model, batch, *a, **k)

    monkeypatch.setattr(T, "model_forward", counting)
    model = init_params(SMALL, RngStream(0, "init"))
    T.predict(model, _records(4), FakeVolumes())
    assert calls == [(1, 1, 16, 16, 8)] * 4


def test_training_samples_2d_are_slices():
    cfg = config_tiny(2, size=8)
    samples = T._training_samples(cfg, _records(2))
    assert len(samples) == 32 and samples[17] == (1, 1)


def read_history(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_train_run_outputs(small_cohort, tmp_path):
    cfg = T.TrainConfig(epochs=3, batch_size=2, model_config=SMALL)
    result = T.train_run(cfg, small_cohort, 11, tmp_path / "run")
    for name in ("best.nnw1", "history.csv", "scores_train.csv", "scores_val.csv", "scores_test.csv"):
        assert (tmp_path / "run" / name).exists()
    hist = read_history(tmp_path / "run/history.csv")
    val = [float(r["val_loss"]) for r in hist]
    assert len(hist) == 3 and result.best_epoch == int(np.argmin(val))
    assert val == result.val_loss
    assert read_tensors(tmp_path / "run/best.nnw1")[0] == SMALL.name
    test = T.read_scores(tmp_path / "run/scores_test.csv")
    np.testing.assert_array_equal(test.scores, result.scores["test"].scores)
    # the stored scores come from the best checkpoint, so its validation loss reproduces the minimum
    weights = T.class_weights(*T.class_counts(small_cohort, "train"))
    best = T.weights_load(tmp_path / "run/best.nnw1", SMALL)
    assert T.validation_loss(best, small_cohort.split("val"), T.VolumeStore(small_cohort), weights) == min(val)


def test_train_run_reproducible(small_cohort, tmp_path):
    cfg = T.TrainConfig(epochs=2, batch_size=3, model_config=SMALL)
    T.train_run(cfg, small_cohort, 5, tmp_path / "a")
    T.train_run(cfg, small_cohort, 5, tmp_path / "b")
    for name in ("best.nnw1", "history.csv", "scores_test.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_repeated_layout(small_cohort, tmp_path):
    cfg = T.TrainConfig(epochs=1, batch_size=4, runs=2, root_seed=3, model_config=SMALL, augment=False)
    results = T.train_repeated(cfg, small_cohort, tmp_path)
    assert [r.run_index for r in results] == [0, 1]
    assert results[0].run_seed != results[1].run_seed
    assert (tmp_path / "0/history.csv").exists() and (tmp_path / "1/history.csv").exists()


def test_overfit_tiny_training_set(small_cohort, tmp_path):
    # With enough steps the network memorises the training split.
    no_dropout = config_scratch3d(convs=(4, 4, 4, 8), dense=(8,), input_shape=(1, 16, 16, 8), dropout=0.0,
                                  scale_input=True)
    cfg = T.TrainConfig(epochs=60, batch_size=2, lr=1e-3, model_config=no_dropout, augment=False)
    result = T.train_run(cfg, small_cohort, 1, tmp_path)
    assert result.train_loss[-1] < 0.5 * result.train_loss[0]


def test_empty_validation_split(small_cohort, tmp_path):
    from volnet.cohort import CohortManifest
    no_val = CohortManifest([r for r in small_cohort.records if r.split != "val"], small_cohort.base_dir)
    with pytest.raises(EmptySplit):
        T.train_run(T.TrainConfig(epochs=1, model_config=SMALL), no_val, 0, tmp_path)
