"""Training loop, repeated-run protocol and model-specific inference."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import augment
from .cohort import CohortManifest, PatientRecord, class_counts
from .errors import EmptySplit
from .nn.model import Model, ModelConfig, config_from_name, init_params, model_backward, model_forward
from .nn.weights import weights_load, weights_save
from .optim import AdamState, LossWeights, adam_step, class_weights, wbce
from .tensor import RngStream, hash64
from .volume import CtVolume, Patch, crop_at, load_volume, rearrange_frames, slice_stack

log = logging.getLogger(__name__)

MODEL_NAMES = ("c3d-transfer", "scratch3d", "vgg16-2d")


@dataclass
class TrainConfig:
    model_name: str = "scratch3d"
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-4
    runs: int = 10
    root_seed: int = 0
    threshold: float = 0.50
    augment: bool = True
    weights: Optional[str] = None  # pre-trained base (NNW1), partially loaded
    model_config: Optional[ModelConfig] = None  # overrides model_name

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.runs < 1:
            raise ValueError("epochs, batch_size and runs must all be >= 1")

    @property
    def config(self) -> ModelConfig:
        return self.model_config or config_from_name(self.model_name)


@dataclass
class SplitScores:
    patient_ids: list[str]
    scores: np.ndarray
    labels: np.ndarray


@dataclass
class RunResult:
    run_index: int
    run_seed: int
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int
    checkpoint: Path
    scores: dict[str, SplitScores] = field(default_factory=dict)


def run_seed(root_seed: int, run_index: int) -> int:
    return hash64(root_seed, run_index)


def best_epoch(val_losses) -> int:
    """Index of the lowest validation loss, earliest on ties."""
    return int(np.argmin(np.asarray(val_losses)))


def make_batches(n: int, batch_size: int, rng: RngStream) -> list[np.ndarray]:
    """Shuffle ``range(n)`` and cut it into batches; the last one may be short."""
    if n < 1:
        raise EmptySplit("cannot batch an empty split")
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


class VolumeStore:
    """Lazily loaded preprocessed (u8, 1 mm) volumes keyed by patient id."""

    def __init__(self, manifest: CohortManifest):
        self.manifest = manifest
        self._cache: dict[str, CtVolume] = {}

    def __getitem__(self, record: PatientRecord) -> CtVolume:
        vol = self._cache.get(record.patient_id)
        if vol is None:
            vol = load_volume(self.manifest.volume_file(record))
            self._cache[record.patient_id] = vol
        return vol


def network_inputs(cfg: ModelConfig, patch: Patch) -> np.ndarray:
    """Model inputs for one patch: shape (1, *input) for 3D layouts, (slices, *input) for 2D."""
    if cfg.layout == "volume":
        x = patch.values[None, None]
    elif cfg.layout == "frames":
        x = rearrange_frames(patch).transpose(3, 0, 1, 2)[None]
    else:
        x = np.stack([s.transpose(2, 0, 1) for s in slice_stack(patch)])
    return np.ascontiguousarray(x, dtype=np.float32)


def predict(model: Model, records, volumes: VolumeStore) -> SplitScores:
    """Eval-mode scores, one forward per patient on the unaugmented patch.

    For the 2D layout the forward covers the patient's stack of slices and the
    patient score is the mean slice score.
    """
    cfg = model.config
    scores = []
    for r in records:
        patch = crop_at(volumes[r], r.gtv_center_mm, (0, 0), cfg.patch_extent)
        out = model_forward(model, network_inputs(cfg, patch), "eval")
        scores.append(float(np.mean(out, dtype=np.float64)))
    return SplitScores([r.patient_id for r in records], np.array(scores), np.array([r.hpv_label for r in records]))


def _training_samples(cfg: ModelConfig, records) -> list[tuple[int, Optional[int]]]:
    # 2D models train on every slice as its own sample carrying the patient label.
    if cfg.layout == "slices":
        n_slices = cfg.patch_depth // 3
        return [(i, k) for i in range(len(records)) for k in range(n_slices)]
    return [(i, None) for i in range(len(records))]


def _sample_input(cfg, record, volume, slice_index, aug_rng):
    spec = augment.sample_spec(aug_rng) if aug_rng is not None else augment.IDENTITY
    patch = augment.apply(spec, volume, record.gtv_center_mm, cfg.patch_extent)
    x = network_inputs(cfg, patch)
    return x[slice_index] if slice_index is not None else x[0]


def train_step(model: Model, opt: AdamState, x: np.ndarray, labels: np.ndarray, weights: LossWeights,
               dropout_rng: RngStream) -> float:
    scores, cache = model_forward(model, x, "train", dropout_rng)
    loss, dscore = wbce(scores, labels, weights)
    adam_step(model.params, model_backward(model, cache, dscore), opt)
    return loss


def validation_loss(model: Model, records, volumes: VolumeStore, weights: LossWeights) -> float:
    """Class-weighted loss of the patient-level eval scores (no augmentation, no dropout)."""
    pred = predict(model, records, volumes)
    return wbce(pred.scores, pred.labels, weights)[0]


def _write_history(path: Path, train_loss, val_loss):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, (t, v) in enumerate(zip(train_loss, val_loss)):
            w.writerow([epoch, repr(float(t)), repr(float(v))])


def write_scores(path: Path, scores: SplitScores):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "score", "label"])
        for pid, s, y in zip(scores.patient_ids, scores.scores, scores.labels):
            w.writerow([pid, repr(float(s)), int(y)])


def read_scores(path) -> SplitScores:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return SplitScores([r["patient_id"] for r in rows], np.array([float(r["score"]) for r in rows]),
                       np.array([int(r["label"]) for r in rows]))


def initial_model(cfg: TrainConfig, seed: int) -> Model:
    model_cfg = cfg.config
    init_rng = RngStream(seed, "init")
    if cfg.weights:
        return weights_load(cfg.weights, model_cfg, init_rng)
    if any(s.frozen for s in model_cfg.layers):
        log.warning("%s: no pre-trained weights given, training on a randomly initialised frozen base",
                    model_cfg.name)
    return init_params(model_cfg, init_rng)


def train_run(cfg: TrainConfig, manifest: CohortManifest, seed: int, out_dir, run_index: int = 0) -> RunResult:
    """Train one model and keep the weights of the epoch with the lowest validation loss.

    Writes ``best.nnw1``, ``history.csv`` and ``scores_<split>.csv`` into ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_cfg = cfg.config
    train_records, val_records = manifest.split("train"), manifest.split("val")
    if not val_records:
        raise EmptySplit("validation split is empty; it is needed for weight selection")
    weights = class_weights(*class_counts(manifest, "train"))
    volumes = VolumeStore(manifest)
    model = initial_model(cfg, seed)
    opt = AdamState(lr=cfg.lr)
    shuffle_rng = RngStream(seed, "shuffle")
    aug_rng = RngStream(seed, "augment") if cfg.augment else None
    dropout_rng = RngStream(seed, "dropout")
    samples = _training_samples(model_cfg, train_records)
    labels = np.array([train_records[i].hpv_label for i, _ in samples])
    checkpoint = out_dir / "best.nnw1"
    train_hist, val_hist = [], []
    best = None
    for epoch in range(cfg.epochs):
        total = 0.0
        for batch in make_batches(len(samples), cfg.batch_size, shuffle_rng):
            x = np.stack([
                _sample_input(model_cfg, train_records[samples[j][0]], volumes[train_records[samples[j][0]]],
                              samples[j][1], aug_rng)
                for j in batch
            ])
            total += train_step(model, opt, x, labels[batch], weights, dropout_rng) * len(batch)
        train_hist.append(total / len(samples))
        val_hist.append(validation_loss(model, val_records, volumes, weights))
        if best is None or val_hist[-1] < best:
            best = val_hist[-1]
            weights_save(model, checkpoint)
        log.info("run %d epoch %d: train %.4f val %.4f", run_index, epoch, train_hist[-1], val_hist[-1])
    _write_history(out_dir / "history.csv", train_hist, val_hist)
    final = weights_load(checkpoint, model_cfg)
    result = RunResult(run_index, seed, train_hist, val_hist, best_epoch(val_hist), checkpoint)
    for split in ("train", "val", "test"):
        records = manifest.split(split)
        if records:
            result.scores[split] = predict(final, records, volumes)
            write_scores(out_dir / f"scores_{split}.csv", result.scores[split])
    return result


def _run_one(args):
    cfg, manifest, index, out_root = args
    return train_run(cfg, manifest, run_seed(cfg.root_seed, index), Path(out_root) / str(index), index)


def train_repeated(cfg: TrainConfig, manifest: CohortManifest, out_root, parallel_runs: int = 1) -> list[RunResult]:
    """``cfg.runs`` independent runs into ``out_root/<run_index>``; results ordered by run index."""
    jobs = [(cfg, manifest, i, str(out_root)) for i in range(cfg.runs)]
    if parallel_runs <= 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(parallel_runs) as pool:
        return list(pool.map(_run_one, jobs))
