"""Training loop: task-per-batch scheduling, Adam updates, periodic
validation, early stopping on the validation emotion concordance.

Every record carries labels for all three tasks, so a batch's task id only
selects which loss pathway is active. Batches cycle tasks round-robin
(emotion, age, country, emotion, ...) across epoch boundaries so each task
gets equal exposure regardless of epoch length.

Single-threaded and bitwise deterministic for a fixed seed: the schedule,
parameter init, and optimizer are all driven by explicit generators, and the
training log serializes floats by their shortest round-trip repr.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import config as cfgmod
from .audio import load_wav, pad_batch
from .data import DatasetManifest, denormalize_age, normalize_age, oversample, read_features
from .losses import BatchTargets, LossWeights, batch_losses
from .metrics import MetricsReport, PredictionSet, ReferenceLabels, report_from_predictions
from .model import Model, ModelCheckpoint, ModelConfig, TaskId, TASKS
from .optim import Adam

EARLY_METRIC = "emotion_ccc"  # the only supported early-stopping metric


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 100
    validate_every: int = 800  # iterations between validations
    patience: int = 20  # consecutive non-improving validations before stop
    early_metric: str = EARLY_METRIC
    lr: float = 1e-5
    discriminator_weight: float = 0.5
    adversarial_weight: float = 0.25
    seed: int = 0
    oversample: bool = False
    adversarial: bool = True
    encoder_mode: str = "feature"
    log_wall_time: bool = False  # off by default so logs are byte-reproducible
    # Desk-scale stabilizers, both inert by default. head_lr_scale > 1 trains
    # heads and the discriminator on a faster timescale than the extractors,
    # which keeps the adversarial min-max from diverging on small models.
    # spec_weight_decay adds decoupled decay on the task-specific extractors,
    # bounding the representation growth the reversed losses otherwise drive.
    head_lr_scale: float = 1.0
    spec_weight_decay: float = 0.0

    def validate(self):
        if min(self.batch_size, self.max_epochs, self.validate_every) < 1:
            raise ValueError("batch_size, max_epochs, validate_every must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.head_lr_scale <= 0:
            raise ValueError("head_lr_scale must be positive")
        if self.spec_weight_decay < 0:
            raise ValueError("spec_weight_decay must be >= 0")
        if self.early_metric != EARLY_METRIC:
            raise ValueError(f"unsupported early-stopping metric {self.early_metric!r}")
        if self.encoder_mode not in ("feature", "conv"):
            raise ValueError(f"unknown encoder mode {self.encoder_mode!r}")
        self.loss_weights().validate()

    def loss_weights(self) -> LossWeights:
        if not self.adversarial:
            return LossWeights(0.0, 0.0)
        return LossWeights(self.discriminator_weight, self.adversarial_weight)

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "TrainConfig":
        m = dict(raw)
        take = cfgmod.take
        cfg = cls(
            batch_size=take(m, "batch_size", int, cls.batch_size),
            max_epochs=take(m, "max_epochs", int, cls.max_epochs),
            validate_every=take(m, "validate_every", int, cls.validate_every),
            patience=take(m, "patience", int, cls.patience),
            early_metric=take(m, "early_metric", str, cls.early_metric),
            lr=take(m, "lr", float, cls.lr),
            discriminator_weight=take(m, "discriminator_weight", float,
                                      cls.discriminator_weight),
            adversarial_weight=take(m, "adversarial_weight", float,
                                    cls.adversarial_weight),
            seed=take(m, "seed", int, cls.seed),
            oversample=take(m, "oversample", cfgmod.parse_bool, cls.oversample),
            adversarial=take(m, "adversarial", cfgmod.parse_bool, cls.adversarial),
            encoder_mode=take(m, "encoder_mode", str, cls.encoder_mode),
            log_wall_time=take(m, "log_wall_time", cfgmod.parse_bool, cls.log_wall_time),
            head_lr_scale=take(m, "head_lr_scale", float, cls.head_lr_scale),
            spec_weight_decay=take(m, "spec_weight_decay", float, cls.spec_weight_decay),
        )
        cfgmod.reject_unknown(m, "train")
        cfg.validate()
        return cfg


@dataclass
class TrainLogEntry:
    iteration: int
    task: TaskId
    output: float
    discriminator: float | None
    adversarial: float | None
    total: float
    wall_time: float = 0.0

    def to_json(self) -> str:
        return json.dumps({
            "iteration": self.iteration,
            "task": self.task.name,
            "output": self.output,
            "discriminator": self.discriminator,
            "adversarial": self.adversarial,
            "total": self.total,
            "wall_time": self.wall_time,
        })


def log_to_jsonl(entries: list[TrainLogEntry]) -> str:
    return "".join(e.to_json() + "\n" for e in entries)


@dataclass
class TrainResult:
    best_checkpoint: ModelCheckpoint
    final_checkpoint: ModelCheckpoint  # weights at the last iteration run
    best_metric: float
    best_iteration: int
    validations: list  # (iteration, metric, MetricsReport | None)
    log: list
    iterations: int
    stopped_early: bool


# -- batch scheduling ------------------------------------------------------------

def schedule_batches(train_indices, batch_size: int, seed: int, epochs: int = 1):
    """Yield (task, record index array) minibatches.

    Each epoch is a fresh shuffle of the train indices; remainder batches are
    kept so small datasets are fully used. The task cycle continues across
    epochs rather than restarting.
    """
    indices = np.asarray(train_indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("train split is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    task_cycle = itertools.cycle(TASKS)
    for _ in range(epochs):
        order = indices[rng.permutation(indices.size)]
        for start in range(0, order.size, batch_size):
            yield next(task_cycle), order[start:start + batch_size]


# -- media loading -----------------------------------------------------------------

class BatchSource:
    """Loads and caches per-record model inputs.

    Feature mode returns a list of (T, D) arrays; conv mode returns a
    zero-padded waveform batch. Media is assumed preprocessed (16 kHz mono,
    level-normalized) for conv mode.
    """

    def __init__(self, manifest: DatasetManifest, encoder_mode: str):
        if encoder_mode not in ("feature", "conv"):
            raise ValueError(f"unknown encoder mode {encoder_mode!r}")
        self.manifest = manifest
        self.encoder_mode = encoder_mode
        self._cache: dict[int, object] = {}

    def _load(self, idx: int):
        if idx not in self._cache:
            record = self.manifest.records[idx]
            path = self.manifest.media_path(record)
            if self.encoder_mode == "feature":
                self._cache[idx] = read_features(path)
            else:
                self._cache[idx] = load_wav(path)
        return self._cache[idx]

    def batch_inputs(self, indices):
        items = [self._load(int(i)) for i in indices]
        if self.encoder_mode == "feature":
            return items
        return pad_batch(items)

    def batch_targets(self, indices) -> BatchTargets:
        records = [self.manifest.records[int(i)] for i in indices]
        ages = np.array([r.age for r in records], dtype=np.float64)
        return BatchTargets(
            emotions=np.stack([r.emotions for r in records]).astype(np.float64),
            age_norm=normalize_age(ages, self.manifest.age_min, self.manifest.age_max),
            country=np.array([r.country for r in records], dtype=np.int64),
        )


# -- evaluation over a split ------------------------------------------------------------

def predict_split(model: Model, manifest: DatasetManifest, split: str,
                  batch_size: int = 64) -> PredictionSet:
    """Inference over a split in manifest order; deterministic."""
    indices = manifest.split_indices(split)
    if not indices:
        raise ValueError(f"split {split!r} is empty")
    source = BatchSource(manifest, model.config.encoder_mode)
    emotions, ages, probs, ids = [], [], [], []
    for start in range(0, len(indices), batch_size):
        chunk = indices[start:start + batch_size]
        out = model.predict(source.batch_inputs(chunk))
        emotions.append(out["emotions"])
        ages.append(denormalize_age(out["age_norm"], manifest.age_min, manifest.age_max))
        probs.append(out["country_probs"])
        ids.extend(manifest.records[i].clip_id for i in chunk)
    preds = PredictionSet(tuple(ids),
                          np.concatenate(emotions).astype(np.float64),
                          np.concatenate(ages).astype(np.float64),
                          np.concatenate(probs).astype(np.float64))
    preds.validate()
    return preds


def validate(checkpoint: ModelCheckpoint, manifest: DatasetManifest, split: str,
             batch_size: int = 64) -> MetricsReport:
    """Full inference pass over a split; predictions use the combined
    representations only, so the adversarial-only paths cannot affect it."""
    model = Model.from_checkpoint(checkpoint)
    preds = predict_split(model, manifest, split, batch_size)
    refs = ReferenceLabels.from_records([r for r in manifest.records if r.split == split])
    return report_from_predictions(preds, refs)


def representations_for_split(model: Model, manifest: DatasetManifest, split: str,
                              kind: str = "specific", task: TaskId = TaskId.AGE,
                              batch_size: int = 64):
    """Frozen representations of one kind over a split, plus country labels.
    Used by the linear probe to measure leaked demographic information."""
    indices = manifest.split_indices(split)
    if not indices:
        raise ValueError(f"split {split!r} is empty")
    source = BatchSource(manifest, model.config.encoder_mode)
    reps = []
    for start in range(0, len(indices), batch_size):
        chunk = indices[start:start + batch_size]
        bundle, _ = model.forward_reps(source.batch_inputs(chunk))
        if kind == "shared":
            rep = bundle.shared
        elif kind == "specific":
            rep = bundle.specific[task]
        elif kind == "combined":
            rep = bundle.combined[task]
        else:
            raise ValueError(f"unknown representation kind {kind!r}")
        reps.append(np.asarray(rep.data, dtype=np.float64))
    labels = np.array([manifest.records[i].country for i in indices], dtype=np.int64)
    return np.concatenate(reps), labels


# -- the training loop ------------------------------------------------------------

def train(train_cfg: TrainConfig, model_cfg: ModelConfig, manifest: DatasetManifest,
          validate_fn=None, validation_batch_size: int = 64) -> TrainResult:
    """Run the full loop and return the checkpoint with the best validation
    emotion concordance.

    validate_fn(model, iteration) -> (metric, report | None) can be injected
    for tests; the default runs real validation on the manifest's validation
    split.
    """
    train_cfg.validate()
    model_cfg.validate()
    if train_cfg.encoder_mode != model_cfg.encoder_mode:
        raise ValueError("train and model encoder modes disagree")

    train_indices = manifest.split_indices("train")
    if not train_indices:
        raise ValueError("train split is empty")
    if train_cfg.oversample:
        train_indices = oversample(manifest, seed=train_cfg.seed)

    if validate_fn is None:
        if not manifest.split_indices("validation"):
            raise ValueError("validation split is empty")

        def validate_fn(model, iteration):
            preds = predict_split(model, manifest, "validation", validation_batch_size)
            refs = ReferenceLabels.from_records(
                [r for r in manifest.records if r.split == "validation"])
            report = report_from_predictions(preds, refs)
            return report.emotion_ccc, report

    model = Model(model_cfg, seed=train_cfg.seed)
    lr_scales = None
    if train_cfg.head_lr_scale != 1.0:
        lr_scales = {name: train_cfg.head_lr_scale for name in model.params
                     if name.startswith(("head.", "disc."))}
    optimizer = Adam(model.params, lr=train_cfg.lr, lr_scales=lr_scales)
    decayed = [p for name, p in model.params.items() if name.startswith("spec.")]
    decay_factor = 1.0 - train_cfg.lr * train_cfg.spec_weight_decay
    source = BatchSource(manifest, train_cfg.encoder_mode)
    weights = train_cfg.loss_weights()

    log: list[TrainLogEntry] = []
    validations = []
    best_metric = -math.inf
    best_iteration = -1
    best_checkpoint = None
    bad_validations = 0
    iteration = 0
    stopped = False
    start_time = time.monotonic()

    def run_validation():
        nonlocal best_metric, best_iteration, best_checkpoint, bad_validations, stopped
        metric, report = validate_fn(model, iteration)
        validations.append((iteration, float(metric), report))
        if metric > best_metric:
            best_metric = float(metric)
            best_iteration = iteration
            best_checkpoint = model.checkpoint(step=iteration)
            bad_validations = 0
        else:
            bad_validations += 1
            if bad_validations >= train_cfg.patience:
                stopped = True

    schedule = schedule_batches(train_indices, train_cfg.batch_size,
                                train_cfg.seed, epochs=train_cfg.max_epochs)
    for task, batch_indices in schedule:
        inputs = source.batch_inputs(batch_indices)
        targets = source.batch_targets(batch_indices)
        bundle, _ = model.forward_reps(inputs)
        losses = batch_losses(model, task, bundle, targets, weights,
                              adversarial=train_cfg.adversarial)
        if not math.isfinite(losses.total):
            raise TrainingDiverged(
                f"non-finite loss at iteration {iteration + 1} "
                f"(task {task.name}): output={losses.output!r} "
                f"discriminator={losses.discriminator!r} "
                f"adversarial={losses.adversarial!r}")
        optimizer.zero_grad()
        losses.objective.backward()
        optimizer.step()
        if train_cfg.spec_weight_decay > 0.0:
            for p in decayed:
                p.data *= decay_factor
        iteration += 1
        log.append(TrainLogEntry(
            iteration=iteration,
            task=task,
            output=losses.output,
            discriminator=losses.discriminator,
            adversarial=losses.adversarial,
            total=losses.total,
            wall_time=time.monotonic() - start_time if train_cfg.log_wall_time else 0.0,
        ))
        if iteration % train_cfg.validate_every == 0:
            run_validation()
            if stopped:
                break

    if not stopped and (not validations or validations[-1][0] != iteration):
        run_validation()  # final weights were never scored

    return TrainResult(
        best_checkpoint=best_checkpoint,
        final_checkpoint=model.checkpoint(step=iteration),
        best_metric=best_metric,
        best_iteration=best_iteration,
        validations=validations,
        log=log,
        iterations=iteration,
        stopped_early=stopped,
    )
