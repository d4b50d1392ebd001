"""Dataset manifests, label handling, oversampling, and synthetic data.

A manifest is a CSV with header ``clip_id,media,split,age,country,e0..e9``;
media paths are relative to the manifest's directory. Emotion intensities are
stored normalised in [0, 1] (raw [1, 100] self-report values are accepted
behind a flag and divided by 100). Ages stay in years in the manifest and are
0-1 normalised only where training needs it.

The synthetic generator reproduces, at desk scale, the cross-label skew the
real corpus exhibits: country is uniform, and age is drawn from a
country-conditional distribution in which one designated country is older.
The strength of the age/older-country correlation is a config knob, so the
debiasing machinery can be exercised against a known, adjustable bias.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import audio

COUNTRIES = ("China", "South Africa", "USA", "Venezuela")
OLDER_COUNTRY = "USA"
EMOTIONS = ("Amusement", "Awe", "Awkwardness", "Distress", "Excitement",
            "Fear", "Horror", "Sadness", "Surprise", "Triumph")
N_EMOTIONS = 10
SPLITS = ("train", "validation", "test")

AGE_MIN = 20.0
AGE_MAX = 39.0
DEFAULT_AGE_BIN_EDGES = (20.0, 25.0, 30.0, 35.0, 40.0)

FEATURE_MAGIC = b"B2VF"
FEATURE_VERSION = 1

MANIFEST_HEADER = ["clip_id", "media", "split", "age", "country"] + [f"e{i}" for i in range(N_EMOTIONS)]


class ManifestError(ValueError):
    pass


@dataclass
class LabelRecord:
    clip_id: str
    media: str  # path relative to the manifest directory
    split: str
    age: float  # years
    country: int  # index into the country vocabulary
    emotions: np.ndarray  # 10 floats in [0, 1]


@dataclass
class DatasetManifest:
    records: list[LabelRecord]
    root: Path
    countries: tuple = COUNTRIES
    age_min: float = AGE_MIN
    age_max: float = AGE_MAX

    def split(self, name: str) -> list[LabelRecord]:
        return [r for r in self.records if r.split == name]

    def split_indices(self, name: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == name]

    def media_path(self, record: LabelRecord) -> Path:
        return self.root / record.media


# -- age normalisation ---------------------------------------------------------

def normalize_age(age_years, age_min: float = AGE_MIN, age_max: float = AGE_MAX):
    if age_max <= age_min:
        raise ValueError(f"degenerate age range [{age_min}, {age_max}]")
    return (np.asarray(age_years, dtype=np.float64) - age_min) / (age_max - age_min)


def denormalize_age(value, age_min: float = AGE_MIN, age_max: float = AGE_MAX):
    if age_max <= age_min:
        raise ValueError(f"degenerate age range [{age_min}, {age_max}]")
    return np.asarray(value, dtype=np.float64) * (age_max - age_min) + age_min


# -- manifest I/O -----------------------------------------------------------------

def load_manifest(csv_path, raw_emotions: bool = False,
                  countries: tuple = COUNTRIES,
                  age_min: float = AGE_MIN, age_max: float = AGE_MAX,
                  check_media: bool = True) -> DatasetManifest:
    """Parse and validate a manifest CSV.

    raw_emotions: emotion columns are on the [1, 100] self-report scale and
    get divided by 100; otherwise they must already be in [0, 1].
    """
    csv_path = Path(csv_path)
    root = csv_path.parent
    records = []
    seen = set()
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(f"{csv_path}: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"{csv_path}:{lineno}: expected "
                                    f"{len(MANIFEST_HEADER)} fields, got {len(row)}")
            clip_id, media, split, age_s, country_s = row[:5]
            if clip_id in seen:
                raise ManifestError(f"{csv_path}:{lineno}: duplicate clip_id {clip_id!r}")
            seen.add(clip_id)
            if split not in SPLITS:
                raise ManifestError(f"{csv_path}:{lineno}: unknown split {split!r}")
            age = float(age_s)
            if not age_min <= age <= age_max:
                raise ManifestError(f"{csv_path}:{lineno}: age {age} outside "
                                    f"[{age_min}, {age_max}]")
            if country_s not in countries:
                raise ManifestError(f"{csv_path}:{lineno}: country {country_s!r} "
                                    f"not in vocabulary {countries}")
            emo = np.array([float(v) for v in row[5:]], dtype=np.float64)
            if raw_emotions:
                if np.any(emo < 0.0) or np.any(emo > 100.0):
                    raise ManifestError(f"{csv_path}:{lineno}: raw emotion outside [0, 100]")
                emo = emo / 100.0
            elif np.any(emo < 0.0) or np.any(emo > 1.0):
                raise ManifestError(f"{csv_path}:{lineno}: emotion outside [0, 1]")
            if check_media and not (root / media).exists():
                raise ManifestError(f"{csv_path}:{lineno}: missing media file {media!r}")
            records.append(LabelRecord(clip_id, media, split, age,
                                       countries.index(country_s), emo))
    return DatasetManifest(records, root, countries, age_min, age_max)


def save_manifest(manifest: DatasetManifest, csv_path):
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            writer.writerow([r.clip_id, r.media, r.split, repr(r.age),
                             manifest.countries[r.country]]
                            + [repr(float(v)) for v in r.emotions])


# -- feature files -------------------------------------------------------------------
#
# Per-clip binary: 16-byte header (magic "B2VF", version u32, T u32, D u32,
# little-endian) followed by T*D float32 values, row-major.

def write_features(path, frames: np.ndarray):
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2:
        raise ValueError(f"feature frames must be 2-d (T, D), got {frames.shape}")
    t, d = frames.shape
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, t, d)
    Path(path).write_bytes(header + frames.astype("<f4").tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    version, t, d = struct.unpack_from("<III", raw, 4)
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature version {version}")
    need = 16 + t * d * 4
    if len(raw) < need:
        raise ValueError(f"{path}: truncated feature file ({len(raw)} of {need} bytes)")
    return np.frombuffer(raw, dtype="<f4", count=t * d, offset=16).reshape(t, d).astype(np.float32)


# -- cross-label oversampling ----------------------------------------------------------

@dataclass
class JointCell:
    country: int
    age_bin: int
    members: list[int]


def joint_cells(manifest: DatasetManifest,
                age_bin_edges=DEFAULT_AGE_BIN_EDGES) -> list[JointCell]:
    """Partition train records into country x age-bin cells (nonempty only)."""
    edges = np.asarray(age_bin_edges, dtype=np.float64)
    cells: dict[tuple, list] = {}
    for idx in manifest.split_indices("train"):
        r = manifest.records[idx]
        b = int(np.searchsorted(edges, r.age, side="right") - 1)
        b = min(max(b, 0), edges.size - 2)
        cells.setdefault((r.country, b), []).append(idx)
    return [JointCell(c, b, members)
            for (c, b), members in sorted(cells.items())]


def oversample(manifest: DatasetManifest, age_bin_edges=DEFAULT_AGE_BIN_EDGES,
               seed: int = 0) -> list[int]:
    """Equalise the joint country x age-bin cells by sampling with replacement.

    Returns the original train indices in manifest order followed by the
    extra draws (cells visited in sorted order), so an already-balanced
    manifest comes back unchanged. Empty cells are skipped, not imputed.
    """
    cells = joint_cells(manifest, age_bin_edges)
    if not cells:
        raise ValueError("train split is empty")
    target = max(len(c.members) for c in cells)
    out = list(manifest.split_indices("train"))
    rng = np.random.default_rng(seed)
    for cell in cells:
        deficit = target - len(cell.members)
        if deficit > 0:
            out.extend(int(cell.members[j])
                       for j in rng.integers(0, len(cell.members), size=deficit))
    return out


# -- synthetic generator --------------------------------------------------------------

@dataclass
class SynthConfig:
    """Controls for the synthetic biased dataset.

    age_country_bias is the target sample correlation between age and the
    "is the older country" indicator; 0 produces an unbiased control set.
    """

    n_clips: int = 1000
    n_countries: int = 4
    age_country_bias: float = 0.6
    mode: str = "feature"  # or "waveform"
    train_frac: float = 0.7
    val_frac: float = 0.15
    age_min: float = AGE_MIN
    age_max: float = AGE_MAX
    older_country: int = -1  # -1: vocabulary index of "USA" when C=4, else last

    # feature mode: frames = shared bump + task-linked directions + noise
    feature_dim: int = 64
    frames_min: int = 20
    frames_max: int = 30
    emotion_gain: float = 1.0
    age_gain: float = 0.8
    country_gain: float = 1.5
    feature_noise: float = 0.6

    # waveform mode
    sample_rate: int = 16000
    duration_min: float = 0.5
    duration_max: float = 1.5
    snr_db: float = 20.0

    def validate(self):
        if self.n_clips < 1:
            raise ValueError("n_clips must be >= 1")
        if self.n_countries < 2:
            raise ValueError("n_countries must be >= 2")
        if not -1.0 <= self.age_country_bias <= 1.0:
            raise ValueError(f"age_country_bias {self.age_country_bias} outside [-1, 1]")
        if self.mode not in ("feature", "waveform"):
            raise ValueError(f"mode must be feature or waveform, got {self.mode!r}")
        if not 0.0 < self.train_frac < 1.0 or self.val_frac < 0.0 \
                or self.train_frac + self.val_frac > 1.0:
            raise ValueError("train/val fractions must fit in (0, 1)")
        if self.age_max <= self.age_min:
            raise ValueError("age_max must exceed age_min")


def _country_names(n: int) -> tuple:
    return COUNTRIES if n == 4 else tuple(f"country_{i}" for i in range(n))


def _bias_mix_weight(rho: float, n_countries: int) -> float:
    # age = (1-w)*uniform + w*indicator(older country); solve w for the target
    # correlation using var(uniform)=1/12 and var(indicator)=p(1-p).
    if rho == 0.0:
        return 0.0
    p = 1.0 / n_countries
    s = np.sqrt(p * (1.0 - p))
    r = abs(rho)
    return float(r / (r + s * np.sqrt(12.0 * (1.0 - r * r))))


def _emotion_mod_rates(n: int) -> np.ndarray:
    return 2.0 + 1.0 * np.arange(n)  # 2..11 Hz, one rate per emotion


def _synth_waveform(rng, cfg: SynthConfig, age_norm: float, country: int,
                    emotions: np.ndarray) -> np.ndarray:
    sr = cfg.sample_rate
    n = int(round(rng.uniform(cfg.duration_min, cfg.duration_max) * sr))
    t = np.arange(n) / sr
    # fundamental drops linearly with age; a small second harmonic adds body
    f0 = 300.0 - 150.0 * age_norm
    carrier = np.sin(2 * np.pi * f0 * t) + 0.4 * np.sin(2 * np.pi * 2 * f0 * t)
    # country-specific spectral bump
    f_c = 1000.0 + 500.0 * country
    carrier = carrier + 0.3 * np.sin(2 * np.pi * f_c * t)
    # per-emotion amplitude modulation, depth proportional to intensity
    envelope = 1.0 + (0.08 * emotions[:, None]
                      * np.sin(2 * np.pi * _emotion_mod_rates(emotions.size)[:, None] * t)).sum(axis=0)
    x = envelope * carrier
    sig_power = np.mean(x ** 2)
    noise = rng.normal(size=n) * np.sqrt(sig_power / 10 ** (cfg.snr_db / 10.0))
    x = x + noise
    peak = np.abs(x).max()
    if peak > 0:
        x = 0.9 * x / peak
    return x


@dataclass
class _FeatureBasis:
    base: np.ndarray
    emotion_dirs: np.ndarray  # (D, 10)
    age_dir: np.ndarray  # (D,)
    country_dirs: np.ndarray  # (D, C)


def _feature_basis(seed: int, cfg: SynthConfig) -> _FeatureBasis:
    rng = np.random.default_rng(seed)
    d = cfg.feature_dim
    scale = 1.0 / np.sqrt(d)
    return _FeatureBasis(
        base=rng.normal(size=d) * scale,
        emotion_dirs=rng.normal(size=(d, N_EMOTIONS)) * scale * cfg.emotion_gain,
        age_dir=rng.normal(size=d) * scale * cfg.age_gain,
        country_dirs=rng.normal(size=(d, cfg.n_countries)) * scale * cfg.country_gain,
    )


def _synth_features(rng, cfg: SynthConfig, basis: _FeatureBasis, age_norm: float,
                    country: int, emotions: np.ndarray) -> np.ndarray:
    t = int(rng.integers(cfg.frames_min, cfg.frames_max + 1))
    clip_vec = (basis.base
                + basis.emotion_dirs @ (emotions - 0.5)
                + basis.age_dir * (age_norm - 0.5)
                + basis.country_dirs[:, country])
    noise = rng.normal(size=(t, cfg.feature_dim)) * cfg.feature_noise
    return (clip_vec[None, :] + noise).astype(np.float32)


def generate_synthetic(cfg: SynthConfig, seed: int, out_dir) -> DatasetManifest:
    """Write a synthetic dataset (manifest + media files) and return it.

    Deterministic for a fixed seed: labels and content for clip i come from a
    generator seeded with seed + i, so generation could be parallelised
    per clip without changing the output.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    media_dir = out_dir / ("feats" if cfg.mode == "feature" else "wavs")
    media_dir.mkdir(exist_ok=True)

    countries = _country_names(cfg.n_countries)
    older = cfg.older_country
    if older < 0:
        older = countries.index(OLDER_COUNTRY) if cfg.n_countries == 4 else cfg.n_countries - 1
    w = _bias_mix_weight(cfg.age_country_bias, cfg.n_countries)
    basis = _feature_basis(seed, cfg) if cfg.mode == "feature" else None

    master = np.random.default_rng(seed)
    split_draw = master.random(cfg.n_clips)
    records = []
    for i in range(cfg.n_clips):
        rng = np.random.default_rng(seed + i)
        country = int(rng.integers(0, cfg.n_countries))
        z = float(country == older)
        if cfg.age_country_bias < 0:
            z = 1.0 - z
        u = (1.0 - w) * rng.random() + w * z
        age = cfg.age_min + u * (cfg.age_max - cfg.age_min)
        emotions = rng.random(N_EMOTIONS)

        if split_draw[i] < cfg.train_frac:
            split = "train"
        elif split_draw[i] < cfg.train_frac + cfg.val_frac:
            split = "validation"
        else:
            split = "test"

        clip_id = f"clip_{i:06d}"
        age_norm = u
        if cfg.mode == "feature":
            media = f"feats/{clip_id}.b2vf"
            write_features(out_dir / media,
                           _synth_features(rng, cfg, basis, age_norm, country, emotions))
        else:
            media = f"wavs/{clip_id}.wav"
            x = _synth_waveform(rng, cfg, age_norm, country, emotions)
            audio.save_wav(out_dir / media,
                           audio.WaveformClip(x, cfg.sample_rate, clip_id))
        records.append(LabelRecord(clip_id, media, split, age, country, emotions))

    manifest = DatasetManifest(records, out_dir, countries, cfg.age_min, cfg.age_max)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest
