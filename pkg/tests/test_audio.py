"""Audio chain: WAV decode, resampling, level normalization, batching."""

import struct

import numpy as np
import pytest

from burst2vec.audio import (AudioFormatError, PaddedBatch, SilentClipError,
                             WaveformClip, load_wav, pad_batch, preprocess_clip,
                             resample, rms_normalize, save_wav)


def sine(freq=440.0, rate=16000, seconds=0.5, amp=0.5):
    t = np.arange(int(rate * seconds)) / rate
    return WaveformClip(amp * np.sin(2 * np.pi * freq * t), rate)


def wav_bytes(fmt_code, channels, rate, bits, payload, fmt_extra=b""):
    fmt_body = struct.pack("<HHIIHH", fmt_code, channels, rate,
                           rate * channels * bits // 8,
                           channels * bits // 8, bits) + fmt_extra
    chunks = b"fmt " + struct.pack("<I", len(fmt_body)) + fmt_body
    if len(fmt_body) % 2:
        chunks += b"\x00"
    chunks += b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks


class TestWavIO:
    def test_16bit_roundtrip_within_one_lsb(self, tmp_path):
        clip = sine()
        path = tmp_path / "a.wav"
        save_wav(path, clip)
        back = load_wav(path)
        assert back.sample_rate == clip.sample_rate
        np.testing.assert_allclose(back.samples, clip.samples, atol=1.0 / 32768.0)

    def test_save_clamps_overshoot(self, tmp_path):
        clip = WaveformClip(np.array([1.5, -1.5, 0.0]), 8000)
        path = tmp_path / "c.wav"
        save_wav(path, clip)
        back = load_wav(path)
        assert back.samples.max() <= 1.0 and back.samples.min() >= -1.0

    def test_8bit(self, tmp_path):
        payload = np.array([128, 255, 0, 128], dtype=np.uint8).tobytes()
        p = tmp_path / "b.wav"
        p.write_bytes(wav_bytes(1, 1, 8000, 8, payload))
        clip = load_wav(p)
        np.testing.assert_allclose(clip.samples, [0.0, 127 / 128, -1.0, 0.0])

    def test_24bit(self, tmp_path):
        vals = [8388607, -8388608, 0]
        payload = b"".join(int(v & 0xFFFFFF).to_bytes(3, "little") for v in vals)
        p = tmp_path / "d.wav"
        p.write_bytes(wav_bytes(1, 1, 16000, 24, payload))
        clip = load_wav(p)
        np.testing.assert_allclose(clip.samples, [8388607 / 8388608, -1.0, 0.0])

    def test_float32(self, tmp_path):
        payload = np.array([0.25, -0.5, 2.0], dtype="<f4").tobytes()
        p = tmp_path / "e.wav"
        p.write_bytes(wav_bytes(3, 1, 44100, 32, payload))
        clip = load_wav(p)
        np.testing.assert_allclose(clip.samples, [0.25, -0.5, 1.0])  # clipped

    def test_stereo_mixdown(self, tmp_path):
        frames = np.array([[16384, -16384], [8192, 8192]], dtype="<i2")
        p = tmp_path / "f.wav"
        p.write_bytes(wav_bytes(1, 2, 22050, 16, frames.tobytes()))
        clip = load_wav(p)
        np.testing.assert_allclose(clip.samples, [0.0, 0.25])

    def test_extensible_format_resolves_subformat(self, tmp_path):
        # cbSize, validBits, channelMask, then the GUID whose first u16 is
        # the real codec (1 = integer PCM)
        extra = struct.pack("<HHIH", 22, 16, 1, 1) + b"\x00" * 14
        payload = np.array([16384], dtype="<i2").tobytes()
        p = tmp_path / "g.wav"
        p.write_bytes(wav_bytes(0xFFFE, 1, 16000, 16, payload, fmt_extra=extra))
        np.testing.assert_allclose(load_wav(p).samples, [0.5])

    @pytest.mark.parametrize("raw", [b"", b"RIFFxxxx", b"OggS" + b"\x00" * 40])
    def test_not_a_wav(self, tmp_path, raw):
        p = tmp_path / "h.wav"
        p.write_bytes(raw)
        with pytest.raises(AudioFormatError):
            load_wav(p)

    def test_truncated_data_chunk(self, tmp_path):
        good = wav_bytes(1, 1, 16000, 16, np.zeros(100, dtype="<i2").tobytes())
        p = tmp_path / "i.wav"
        p.write_bytes(good[:-60])
        with pytest.raises(AudioFormatError):
            load_wav(p)

    def test_unsupported_codec(self, tmp_path):
        p = tmp_path / "j.wav"
        p.write_bytes(wav_bytes(7, 1, 8000, 8, b"\x00\x00"))  # mu-law
        with pytest.raises(AudioFormatError):
            load_wav(p)

    def test_too_many_channels(self, tmp_path):
        p = tmp_path / "k.wav"
        p.write_bytes(wav_bytes(1, 4, 8000, 16, b"\x00" * 16))
        with pytest.raises(AudioFormatError):
            load_wav(p)

    def test_empty_clip_rejected(self):
        with pytest.raises(AudioFormatError):
            WaveformClip(np.array([]), 16000)
        with pytest.raises(AudioFormatError):
            WaveformClip(np.zeros((2, 2)), 16000)
        with pytest.raises(AudioFormatError):
            WaveformClip(np.zeros(4), 0)


class TestResample:
    def test_same_rate_is_copy(self):
        clip = sine()
        out = resample(clip, 16000)
        assert out is not clip
        np.testing.assert_array_equal(out.samples, clip.samples)

    def test_output_length_is_ceil(self):
        clip = WaveformClip(np.zeros(48000) + 0.01, 48000)
        assert resample(clip, 16000).samples.size == 16000
        clip = WaveformClip(np.zeros(48001) + 0.01, 48000)
        assert resample(clip, 16000).samples.size == 16001  # ceil(48001/3)

    def test_preserves_tone_frequency(self):
        clip = sine(freq=440.0, rate=48000, seconds=1.0)
        out = resample(clip, 16000)
        spectrum = np.abs(np.fft.rfft(out.samples))
        peak_hz = np.argmax(spectrum) * 16000 / out.samples.size
        assert abs(peak_hz - 440.0) <= 16000 / out.samples.size

    def test_upsample_preserves_tone(self):
        clip = sine(freq=440.0, rate=8000, seconds=1.0)
        out = resample(clip, 16000)
        assert out.samples.size == 16000
        spectrum = np.abs(np.fft.rfft(out.samples))
        peak_hz = np.argmax(spectrum) * 16000 / out.samples.size
        assert abs(peak_hz - 440.0) <= 16000 / out.samples.size

    def test_amplitude_roughly_preserved(self):
        clip = sine(freq=440.0, rate=48000, seconds=1.0, amp=0.5)
        out = resample(clip, 16000)
        assert abs(out.rms() - clip.rms()) < 0.01

    def test_short_clip_does_not_crash(self):
        clip = WaveformClip(np.ones(5) * 0.1, 48000)
        assert resample(clip, 16000).samples.size == 2

    def test_bad_target_rate(self):
        with pytest.raises(ValueError):
            resample(sine(), 0)


class TestRmsNormalize:
    def test_sine_caps_at_full_scale(self):
        # a pure sine's crest factor (sqrt 2 ~ 1.4142) sits just above the
        # -3 dB boundary (1.4125), so the peak ceiling engages by a hair
        out = rms_normalize(sine(amp=0.1))
        assert np.abs(out.samples).max() == pytest.approx(1.0, abs=1e-12)
        assert out.rms() == pytest.approx(1.0 / np.sqrt(2.0), abs=1e-9)

    def test_square_wave_exact(self):
        # crest factor 1.0: full-scale peak still permits the exact target
        x = np.sign(np.sin(2 * np.pi * 100 * np.arange(1600) / 16000.0)) * 0.2
        out = rms_normalize(WaveformClip(x, 16000))
        assert abs(out.rms() - 10.0 ** (-3.0 / 20.0)) < 1e-9

    def test_high_crest_capped_at_full_scale_peak(self):
        x = np.zeros(1000)
        x[::100] = 0.5  # sparse impulses: RMS tiny, crest huge
        out = rms_normalize(WaveformClip(x, 16000))
        assert np.abs(out.samples).max() == pytest.approx(1.0, abs=1e-12)
        assert out.rms() < 10.0 ** (-3.0 / 20.0)  # cap engaged, target not reached

    def test_idempotent_in_memory(self):
        once = rms_normalize(sine(amp=0.3))
        twice = rms_normalize(once)
        np.testing.assert_allclose(twice.samples, once.samples, atol=1e-12)

    def test_idempotent_through_16bit_export(self, tmp_path):
        clip = sine(amp=0.07)
        first = rms_normalize(clip)
        save_wav(tmp_path / "x.wav", first)
        second = rms_normalize(load_wav(tmp_path / "x.wav"))
        np.testing.assert_allclose(second.samples, first.samples,
                                   atol=2.0 / 32768.0)

    def test_silence_rejected(self):
        with pytest.raises(SilentClipError):
            rms_normalize(WaveformClip(np.zeros(100), 16000))

    def test_near_silence_rejected(self):
        with pytest.raises(SilentClipError):
            rms_normalize(WaveformClip(np.full(100, 1e-9), 16000))


class TestPreprocessChain:
    def test_chain_resamples_then_normalizes(self):
        clip = sine(freq=440, rate=48000, seconds=0.4, amp=0.2)
        out = preprocess_clip(clip)
        assert out.sample_rate == 16000
        # sine crest sits at the cap boundary: RMS lands between the capped
        # level (1/sqrt 2) and the -3 dB target
        assert 0.705 <= out.rms() <= 0.709
        assert np.abs(out.samples).max() <= 1.0


class TestPadBatch:
    def test_shapes_and_lengths(self):
        clips = [WaveformClip(np.ones(5) * 0.1, 16000, "a"),
                 WaveformClip(np.ones(9) * 0.2, 16000, "b")]
        batch = pad_batch(clips)
        assert isinstance(batch, PaddedBatch)
        assert batch.samples.shape == (2, 9)
        np.testing.assert_array_equal(batch.valid_lengths, [5, 9])
        assert batch.source_ids == ["a", "b"]
        np.testing.assert_array_equal(batch.samples[0, 5:], 0.0)

    def test_mixed_rates_rejected(self):
        with pytest.raises(ValueError):
            pad_batch([WaveformClip(np.ones(4), 16000),
                       WaveformClip(np.ones(4), 8000)])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            pad_batch([])
