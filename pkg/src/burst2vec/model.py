"""The multi-task model graph.

Waveforms (or pre-extracted feature frames) are encoded to frame sequences,
average-pooled over the valid frames only, projected down, and split through
a shared extractor plus one extractor per task. Each task also gets a
combined representation: a linear projection of [shared || task-specific].
Inference uses the combined representation exclusively; the shared and
task-specific passes exist for the training losses.

Pooling masks out padded frames, and a frame counts as valid only when its
whole receptive field lies inside the valid sample range, so a clip's
predictions do not depend on what it was batched with.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .autodiff import Tensor, concat, conv1d, conv1d_output_length, reverse_gradient
from . import data as datamod


class TaskId(Enum):
    EMOTION = 0
    AGE = 1
    COUNTRY = 2


TASKS = (TaskId.EMOTION, TaskId.AGE, TaskId.COUNTRY)

CHECKPOINT_MAGIC = b"B2VC"


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    encoder_mode: str = "feature"  # "conv" takes raw waveforms
    conv_kernels: tuple = (10, 8, 4, 4)
    conv_strides: tuple = (5, 4, 2, 2)
    conv_channels: tuple = (64, 64, 64, 64)
    encoder_dim: int = 64  # frame feature width fed to pooling
    proj_dim: int = 32  # width of every representation
    hidden_dim: int = 64  # extractor / discriminator hidden width
    n_countries: int = 4
    n_emotions: int = datamod.N_EMOTIONS
    age_min: float = datamod.AGE_MIN
    age_max: float = datamod.AGE_MAX
    dtype: str = "float32"

    def validate(self):
        if self.encoder_mode not in ("conv", "feature"):
            raise ValueError(f"unknown encoder mode {self.encoder_mode!r}")
        if self.encoder_mode == "conv":
            if not (len(self.conv_kernels) == len(self.conv_strides) == len(self.conv_channels)):
                raise ValueError("conv kernel/stride/channel lists must match in length")
            if any(s < 1 for s in self.conv_strides):
                raise ValueError("conv strides must be >= 1")
            if self.conv_channels[-1] != self.encoder_dim:
                raise ValueError("encoder_dim must equal the last conv channel count")
        if min(self.encoder_dim, self.proj_dim, self.hidden_dim) < 1:
            raise ValueError("model dimensions must be >= 1")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return {
            "encoder_mode": self.encoder_mode,
            "conv_kernels": list(self.conv_kernels),
            "conv_strides": list(self.conv_strides),
            "conv_channels": list(self.conv_channels),
            "encoder_dim": self.encoder_dim,
            "proj_dim": self.proj_dim,
            "hidden_dim": self.hidden_dim,
            "n_countries": self.n_countries,
            "n_emotions": self.n_emotions,
            "age_min": self.age_min,
            "age_max": self.age_max,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**{**d,
                     "conv_kernels": tuple(d.get("conv_kernels", (10, 8, 4, 4))),
                     "conv_strides": tuple(d.get("conv_strides", (5, 4, 2, 2))),
                     "conv_channels": tuple(d.get("conv_channels", (64, 64, 64, 64)))})
        cfg.validate()
        return cfg

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class RepresentationBundle:
    """Per-batch shared / task-specific / combined representations (B x d each)."""

    shared: Tensor
    specific: dict  # TaskId -> Tensor
    combined: dict  # TaskId -> Tensor


@dataclass
class ModelCheckpoint:
    params: dict  # name -> float32 ndarray
    config: ModelConfig
    step: int = 0


def head_output_dim(task: TaskId, config: ModelConfig) -> int:
    if task is TaskId.EMOTION:
        return config.n_emotions
    if task is TaskId.AGE:
        return 1
    return config.n_countries


class Model:
    def __init__(self, config: ModelConfig, params: dict | None = None, seed: int = 0):
        config.validate()
        self.config = config
        if params is None:
            self.params = self._init_params(seed)
        else:
            expected = set(self._param_shapes())
            got = set(params)
            if expected != got:
                missing = expected - got
                extra = got - expected
                raise CheckpointError(f"parameter set mismatch: missing {sorted(missing)}, "
                                      f"unexpected {sorted(extra)}")
            self.params = {k: Tensor(np.asarray(v, dtype=config.np_dtype), requires_grad=True)
                           for k, v in params.items()}

    # -- parameters ---------------------------------------------------------

    def _param_shapes(self) -> dict:
        cfg = self.config
        shapes = {}
        if cfg.encoder_mode == "conv":
            c_in = 1
            for i, (k, c_out) in enumerate(zip(cfg.conv_kernels, cfg.conv_channels)):
                shapes[f"encoder.conv{i}.w"] = (c_out, c_in, k)
                shapes[f"encoder.conv{i}.b"] = (c_out,)
                c_in = c_out
        d, h = cfg.proj_dim, cfg.hidden_dim
        shapes["proj.w"] = (cfg.encoder_dim, d)
        shapes["proj.b"] = (d,)
        for scope in ["shared"] + [f"spec.{t.name.lower()}" for t in TASKS]:
            shapes[f"{scope}.w1"] = (d, h)
            shapes[f"{scope}.b1"] = (h,)
            shapes[f"{scope}.w2"] = (h, d)
            shapes[f"{scope}.b2"] = (d,)
        for t in TASKS:
            shapes[f"combine.{t.name.lower()}.w"] = (2 * d, d)
            shapes[f"combine.{t.name.lower()}.b"] = (d,)
            shapes[f"head.{t.name.lower()}.w"] = (d, head_output_dim(t, cfg))
            shapes[f"head.{t.name.lower()}.b"] = (head_output_dim(t, cfg),)
        shapes["disc.w1"] = (d, h)
        shapes["disc.b1"] = (h,)
        shapes["disc.w2"] = (h, len(TASKS))
        shapes["disc.b2"] = (len(TASKS),)
        return shapes

    def _init_params(self, seed: int) -> dict:
        rng = np.random.default_rng(seed)
        dtype = self.config.np_dtype
        params = {}
        for name, shape in self._param_shapes().items():
            if name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2"):
                arr = np.zeros(shape, dtype=dtype)
            else:
                fan_in = int(np.prod(shape[:-1])) if name.startswith("encoder") \
                    else shape[0]
                if name.startswith("encoder"):
                    fan_in = int(np.prod(shape[1:]))  # (Cout, Cin, K): Cin*K
                scale = np.sqrt(2.0 / fan_in)
                arr = (rng.normal(size=shape) * scale).astype(dtype)
            params[name] = Tensor(arr, requires_grad=True)
        return params

    def _linear(self, x: Tensor, scope: str) -> Tensor:
        return x.matmul(self.params[f"{scope}.w"]) + self.params[f"{scope}.b"]

    def _mlp(self, x: Tensor, scope: str) -> Tensor:
        h = (x.matmul(self.params[f"{scope}.w1"]) + self.params[f"{scope}.b1"]).relu()
        return h.matmul(self.params[f"{scope}.w2"]) + self.params[f"{scope}.b2"]

    # -- encoding -------------------------------------------------------------

    def valid_frames(self, valid_samples: int) -> int:
        """Frames whose full receptive field fits in `valid_samples` samples."""
        n = valid_samples
        for k, s in zip(self.config.conv_kernels, self.config.conv_strides):
            n = max(conv1d_output_length(n, k, s), 0)
        return n

    def encode_waveforms(self, samples: np.ndarray, valid_lengths) -> tuple[Tensor, np.ndarray]:
        """Run the conv stack on a padded (B, T) batch; returns frames
        (B, T', D_enc) and per-clip valid frame counts."""
        if self.config.encoder_mode != "conv":
            raise ValueError("waveform input requires encoder_mode='conv'")
        cfg = self.config
        x = Tensor(np.ascontiguousarray(samples, dtype=cfg.np_dtype)[:, None, :])
        for i, s in enumerate(cfg.conv_strides):
            w = self.params[f"encoder.conv{i}.w"]
            b = self.params[f"encoder.conv{i}.b"]
            x = conv1d(x, w, stride=s) + b.reshape(1, -1, 1)
            x = x.relu()
        counts = np.array([self.valid_frames(int(n)) for n in valid_lengths], dtype=np.int64)
        if np.any(counts < 1):
            raise ValueError("a clip is too short to produce a single encoder frame")
        return x.transpose(0, 2, 1), counts

    def encode_features(self, frames_list: list[np.ndarray]) -> tuple[Tensor, np.ndarray]:
        """Pad pre-extracted (T_i, D) frame arrays into a batch; passthrough."""
        if self.config.encoder_mode != "feature":
            raise ValueError("feature input requires encoder_mode='feature'")
        d = self.config.encoder_dim
        for f in frames_list:
            if f.ndim != 2 or f.shape[1] != d:
                raise ValueError(f"feature dim mismatch: expected (T, {d}), got {f.shape}")
        counts = np.array([f.shape[0] for f in frames_list], dtype=np.int64)
        out = np.zeros((len(frames_list), int(counts.max()), d), dtype=self.config.np_dtype)
        for i, f in enumerate(frames_list):
            out[i, :f.shape[0]] = f
        return Tensor(out), counts

    # -- representation pipeline -----------------------------------------------

    def pool_project(self, frames: Tensor, counts: np.ndarray) -> Tensor:
        """Mean over valid frames only, then linear projection to proj_dim."""
        if np.any(counts < 1):
            raise ValueError("every clip needs at least one valid frame")
        b, t_max, _ = frames.shape
        mask = (np.arange(t_max)[None, :] < counts[:, None]).astype(frames.dtype)
        summed = (frames * Tensor(mask[:, :, None])).sum(axis=1)
        pooled = summed / Tensor(counts.astype(frames.dtype)[:, None])
        return self._linear(pooled, "proj")

    def extract(self, projected: Tensor) -> RepresentationBundle:
        shared = self._mlp(projected, "shared")
        specific = {t: self._mlp(projected, f"spec.{t.name.lower()}") for t in TASKS}
        combined = {t: self._linear(concat([shared, specific[t]], axis=1),
                                    f"combine.{t.name.lower()}")
                    for t in TASKS}
        return RepresentationBundle(shared, specific, combined)

    def head(self, task: TaskId, rep: Tensor) -> Tensor:
        return self._linear(rep, f"head.{task.name.lower()}")

    def discriminate(self, shared: Tensor, reversal_scale: float = 0.0) -> Tensor:
        """Task-discriminator logits (B, 3); gradient into `shared` is
        reversed and scaled by reversal_scale."""
        return self._mlp(reverse_gradient(shared, reversal_scale), "disc")

    # -- inference ------------------------------------------------------------

    def forward_reps(self, batch) -> tuple[RepresentationBundle, np.ndarray]:
        """batch: PaddedBatch-like (samples, valid_lengths) for conv mode, or
        a list of (T, D) arrays for feature mode."""
        if self.config.encoder_mode == "conv":
            frames, counts = self.encode_waveforms(batch.samples, batch.valid_lengths)
        else:
            frames, counts = self.encode_features(batch)
        projected = self.pool_project(frames, counts)
        return self.extract(projected), counts

    def predict(self, batch) -> dict:
        """Inference-mode predictions from the combined representations only.
        Emotion and normalised age are clamped to [0, 1]."""
        bundle, _ = self.forward_reps(batch)
        emotions = self.head(TaskId.EMOTION, bundle.combined[TaskId.EMOTION]).data
        age_norm = self.head(TaskId.AGE, bundle.combined[TaskId.AGE]).data[:, 0]
        logits = self.head(TaskId.COUNTRY, bundle.combined[TaskId.COUNTRY]).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return {
            "emotions": np.clip(emotions, 0.0, 1.0),
            "age_norm": np.clip(age_norm, 0.0, 1.0),
            "country_probs": e / e.sum(axis=1, keepdims=True),
        }

    # -- checkpointing -----------------------------------------------------------

    def checkpoint(self, step: int = 0) -> ModelCheckpoint:
        return ModelCheckpoint(
            {k: np.asarray(p.data, dtype=np.float32).copy() for k, p in self.params.items()},
            self.config, step)

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "Model":
        return cls(ckpt.config, params=ckpt.params)


# -- checkpoint file format -----------------------------------------------------
#
# [magic "B2VC"][u32 header length][canonical JSON header][float32 LE blob]
# header: {"config": {...}, "fingerprint": sha256, "step": n,
#          "params": {name: {"offset": byte offset, "shape": [...]}}}

def save_checkpoint(path, ckpt: ModelCheckpoint):
    names = sorted(ckpt.params)
    index = {}
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    header = {
        "config": ckpt.config.to_dict(),
        "fingerprint": ckpt.config.fingerprint(),
        "step": ckpt.step,
        "params": index,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> ModelCheckpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + hlen].decode())
    config = ModelConfig.from_dict(header["config"])
    if config.fingerprint() != header["fingerprint"]:
        raise CheckpointError(f"{path}: config fingerprint mismatch")
    blob = raw[8 + hlen:]
    params = {}
    for name, meta in header["params"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(blob, dtype="<f4", count=count,
                                     offset=meta["offset"]).reshape(shape).copy()
    return ModelCheckpoint(params, config, header.get("step", 0))
