"""Audio ingestion and the preprocessing chain.

Decode PCM WAV, mix to mono, resample to 16 kHz with a Kaiser-windowed sinc
polyphase filter, normalise RMS to -3 dBFS, and zero-pad clips into batches.
All operations are pure; per-file parallelism is safe.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import upfirdn

TARGET_RATE = 16000
TARGET_RMS_DB = -3.0

# Resampler design: lowpass at 0.45x the lower of the two rates, Kaiser window
# with beta 8.6 (~90 dB stopband), ~21 taps per polyphase branch.
_CUTOFF_FRACTION = 0.45
_KAISER_BETA = 8.6
_HALF_TAPS_PER_PHASE = 10


class AudioFormatError(ValueError):
    """Unsupported or malformed WAV data."""


class SilentClipError(ValueError):
    """RMS normalisation asked of an (effectively) all-zero clip."""


@dataclass
class WaveformClip:
    """Mono audio samples in [-1, 1] with their sample rate."""

    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise AudioFormatError("clip must hold at least one mono sample")
        if self.sample_rate <= 0:
            raise AudioFormatError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples ** 2)))


@dataclass
class PaddedBatch:
    """Right-zero-padded sample matrix (B, T_max) plus per-row valid lengths."""

    samples: np.ndarray
    valid_lengths: np.ndarray
    sample_rate: int
    source_ids: list = field(default_factory=list)


# -- WAV I/O --------------------------------------------------------------------
#
# Stdlib `wave` cannot read IEEE-float WAVs, so the RIFF walk is done by hand.
# Supported: format 1 (integer PCM, 8/16/24-bit) and format 3 (32-bit float),
# 1 or 2 channels. WAVE_FORMAT_EXTENSIBLE (0xFFFE) resolves to its sub-format.

def load_wav(path) -> WaveformClip:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (chunk_len,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + chunk_len]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise AudioFormatError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == 0xFFFE and len(body) >= 26:  # extensible: sub-format GUID
                (sub,) = struct.unpack_from("<H", body, 24)
                fmt = (sub,) + fmt[1:]
        elif chunk_id == b"data":
            if len(body) < chunk_len:
                raise AudioFormatError(f"{path}: truncated data chunk "
                                       f"({len(body)} of {chunk_len} bytes)")
            data = body
        pos += 8 + chunk_len + (chunk_len & 1)  # chunks are word-aligned

    if fmt is None or data is None:
        raise AudioFormatError(f"{path}: missing fmt or data chunk")
    audio_format, channels, rate, _, block_align, bits = fmt
    if channels not in (1, 2):
        raise AudioFormatError(f"{path}: {channels} channels unsupported (mono/stereo only)")

    if audio_format == 1 and bits == 8:
        x = (np.frombuffer(data, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif audio_format == 1 and bits == 16:
        x = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 1 and bits == 24:
        b = np.frombuffer(data, dtype=np.uint8)
        if b.size % 3:
            raise AudioFormatError(f"{path}: 24-bit data not a multiple of 3 bytes")
        b = b.reshape(-1, 3)
        vals = (b[:, 0].astype(np.int32)
                | (b[:, 1].astype(np.int32) << 8)
                | (b[:, 2].astype(np.int32) << 16))
        vals -= (vals >> 23) << 24  # sign-extend
        x = vals.astype(np.float64) / 8388608.0
    elif audio_format == 3 and bits == 32:
        x = np.clip(np.frombuffer(data, dtype="<f4").astype(np.float64), -1.0, 1.0)
    else:
        raise AudioFormatError(f"{path}: unsupported codec "
                               f"(format {audio_format}, {bits}-bit)")

    if channels == 2:
        if x.size % 2:
            raise AudioFormatError(f"{path}: stereo data with odd sample count")
        x = x.reshape(-1, 2).mean(axis=1)
    if x.size == 0:
        raise AudioFormatError(f"{path}: empty data chunk")
    return WaveformClip(x, rate, source_id=str(path))


def save_wav(path, clip: WaveformClip):
    """Write a clip as 16-bit PCM, clamping any overshoot to full scale."""
    x = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    data = x.tobytes()
    rate = clip.sample_rate
    header = (b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
              + b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, rate, rate * 2, 2, 16)
              + b"data" + struct.pack("<I", len(data)))
    Path(path).write_bytes(header + data)


# -- resampling -------------------------------------------------------------------

def _design_lowpass(up: int, down: int) -> np.ndarray:
    # Half-width rounded up to a multiple of `down` so the output grid lands
    # exactly on the filter's group delay.
    half = _HALF_TAPS_PER_PHASE * max(up, down)
    half = -(-half // down) * down
    n = np.arange(2 * half + 1)
    fc = _CUTOFF_FRACTION / max(up, down)  # cycles/sample at the upsampled rate
    h = 2.0 * fc * np.sinc(2.0 * fc * (n - half))
    h *= np.kaiser(n.size, _KAISER_BETA)
    h *= up / h.sum()
    return h


def resample(clip: WaveformClip, target_rate: int = TARGET_RATE) -> WaveformClip:
    """Band-limited resample; output length is ceil(N * target / source)."""
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if clip.sample_rate == target_rate:
        return WaveformClip(clip.samples.copy(), clip.sample_rate, clip.source_id)

    ratio = Fraction(target_rate, clip.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    n_out = -(-clip.samples.size * up // down)  # ceil
    h = _design_lowpass(up, down)
    half = (h.size - 1) // 2
    y = upfirdn(h, clip.samples, up=up, down=down)
    skip = half // down
    if y.size < skip + n_out:  # short clips: filter tail needs explicit zeros
        pad = math.ceil((skip + n_out - y.size) * down / up) + 1
        y = upfirdn(h, np.concatenate([clip.samples, np.zeros(pad)]), up=up, down=down)
    return WaveformClip(y[skip:skip + n_out], target_rate, clip.source_id)


# -- level normalisation ------------------------------------------------------------

def rms_normalize(clip: WaveformClip, target_db: float = TARGET_RMS_DB) -> WaveformClip:
    """Scale to the target RMS level (dB re full scale 1.0).

    Pure gain, capped so the peak never exceeds full scale: amplifying a
    high-crest signal past |1| would clip at 16-bit export and break
    re-preprocessing idempotence. Signals with crest factor below
    1/target_rms (about 1.41 at -3 dB) hit the exact target RMS.
    """
    rms = clip.rms()
    if rms < 1e-8:
        raise SilentClipError(f"{clip.source_id or 'clip'}: RMS {rms:.2e} below 1e-8")
    gain = 10.0 ** (target_db / 20.0) / rms
    peak = float(np.abs(clip.samples).max())
    out = clip.samples * (gain if peak * gain <= 1.0 else 1.0 / peak)
    np.clip(out, -1.0, 1.0, out=out)  # shave rounding overshoot of peak/peak
    return WaveformClip(out, clip.sample_rate, clip.source_id)


def preprocess_clip(clip: WaveformClip, target_rate: int = TARGET_RATE,
                    target_db: float = TARGET_RMS_DB) -> WaveformClip:
    """Full chain: resample to 16 kHz then normalise to -3 dBFS (input is
    already mono after load_wav)."""
    return rms_normalize(resample(clip, target_rate), target_db)


# -- batching ------------------------------------------------------------------------

def pad_batch(clips: list[WaveformClip]) -> PaddedBatch:
    """Stack clips into a (B, T_max) matrix, zero-filled on the right."""
    if not clips:
        raise ValueError("pad_batch needs at least one clip")
    rates = {c.sample_rate for c in clips}
    if len(rates) > 1:
        raise ValueError(f"mixed sample rates in batch: {sorted(rates)}")
    lengths = np.array([c.samples.size for c in clips], dtype=np.int64)
    out = np.zeros((len(clips), int(lengths.max())), dtype=np.float64)
    for i, c in enumerate(clips):
        out[i, :c.samples.size] = c.samples
    return PaddedBatch(out, lengths, clips[0].sample_rate,
                       [c.source_id for c in clips])
