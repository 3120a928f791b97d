"""Acoustic front end against independently coded oracles."""

import math
import struct
import wave

import numpy as np
import pytest

from mmsent import dsp
from mmsent.dsp import (
    FeatureSequence,
    Waveform,
    extract_feature,
    fit_standardizer,
    apply_standardizer,
    load_wav,
    logmel_spectrogram,
    mel_filterbank,
    scale_waveform,
    stft,
    write_wav,
)
from mmsent.errors import ConfigError, ContractError, DimensionError, FormatError


def _naive_dft_magnitudes(samples, window=1024, hop=512):
    """Direct O(n^2) DFT per Hann-windowed frame."""
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(window) / window)
    count = 1 + (len(samples) - window) // hop
    bins = window // 2 + 1
    basis = np.exp(-2j * np.pi * np.arange(bins)[:, None] * np.arange(window) / window)
    out = np.empty((count, bins))
    for t in range(count):
        out[t] = np.abs(basis @ (samples[t * hop : t * hop + window] * win))
    return out


def _oracle_slaney_filterbank(sr, window, n_mels):
    """Per-bin triangle construction, coded from the scale definition."""

    def mel_of(f):
        if f < 1000.0:
            return f / (200.0 / 3.0)
        return 15.0 + math.log(f / 1000.0) / (math.log(6.4) / 27.0)

    def hz_of(m):
        if m < 15.0:
            return m * 200.0 / 3.0
        return 1000.0 * math.exp((m - 15.0) * (math.log(6.4) / 27.0))

    bins = window // 2 + 1
    top = mel_of(sr / 2.0)
    hzs = [hz_of(top * i / (n_mels + 1)) for i in range(n_mels + 2)]
    fb = np.zeros((n_mels, bins))
    for m in range(n_mels):
        for b in range(bins):
            f = b * sr / window
            if hzs[m] <= f <= hzs[m + 1]:
                w = (f - hzs[m]) / (hzs[m + 1] - hzs[m])
            elif hzs[m + 1] < f <= hzs[m + 2]:
                w = (hzs[m + 2] - f) / (hzs[m + 2] - hzs[m + 1])
            else:
                w = 0.0
            fb[m, b] = w * 2.0 / (hzs[m + 2] - hzs[m])
    return fb


def _oracle_mfcc(samples, sr, window=1024, hop=512, n_mels=64, n_out=13):
    power = _naive_dft_magnitudes(samples, window, hop) ** 2
    fb = _oracle_slaney_filterbank(sr, window, n_mels)
    logmel = np.log(power @ fb.T + 1e-10)
    out = np.zeros((logmel.shape[0], n_out))
    for k in range(n_out):
        scale = math.sqrt((1.0 if k == 0 else 2.0) / n_mels)
        for n in range(n_mels):
            out[:, k] += logmel[:, n] * math.cos(math.pi * k * (2 * n + 1) / (2 * n_mels))
        out[:, k] *= scale
    return out


def _sine(freq, sr, seconds=1.0, amp=0.5):
    t = np.arange(int(sr * seconds)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


class TestLoadWav:
    def test_second_of_zeros(self, tmp_path):
        path = tmp_path / "z.wav"
        write_wav(path, np.zeros(22050), 22050)
        w = load_wav(path)
        assert len(w) == 22050 and w.sample_rate == 22050
        np.testing.assert_array_equal(w.samples, np.zeros(22050))

    def test_full_scale_square_scaling_law(self, tmp_path):
        path = tmp_path / "sq.wav"
        pcm = np.tile(np.array([32767, -32767], dtype="<i2"), 100)
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(2)
            fh.setframerate(22050)
            fh.writeframes(pcm.tobytes())
        w = load_wav(path)
        np.testing.assert_allclose(np.abs(w.samples), 32767 / 32768, atol=0)

    def test_opposed_stereo_averages_to_zero(self, tmp_path, rng):
        path = tmp_path / "st.wav"
        x = np.round(rng.uniform(-30000, 30000, size=128)).astype("<i2")
        inter = np.empty(256, dtype="<i2")
        inter[0::2] = x
        inter[1::2] = -x
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(2)
            fh.setsampwidth(2)
            fh.setframerate(44100)
            fh.writeframes(inter.tobytes())
        w = load_wav(path)
        np.testing.assert_array_equal(w.samples, np.zeros(128))

    def test_float32_codec(self, tmp_path):
        path = tmp_path / "f.wav"
        vals = np.array([0.5, -0.25, 1.0], dtype="<f4")
        body = vals.tobytes()
        fmt = struct.pack("<HHIIHH", 3, 1, 22050, 22050 * 4, 4, 32)
        riff = (
            b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(body)) + b"WAVE"
            + b"fmt " + struct.pack("<I", len(fmt)) + fmt
            + b"data" + struct.pack("<I", len(body)) + body
        )
        path.write_bytes(riff)
        w = load_wav(path)
        np.testing.assert_allclose(w.samples, [0.5, -0.25, 1.0], atol=1e-7)

    def test_bad_magic_reports_offset(self, tmp_path):
        path = tmp_path / "bad.wav"
        path.write_bytes(b"RIFX" + b"\x00" * 40)
        with pytest.raises(FormatError, match="offset 0"):
            load_wav(path)

    def test_unsupported_codec(self, tmp_path):
        path = tmp_path / "ulaw.wav"
        fmt = struct.pack("<HHIIHH", 7, 1, 8000, 8000, 1, 8)
        riff = (
            b"RIFF" + struct.pack("<I", 28) + b"WAVE"
            + b"fmt " + struct.pack("<I", len(fmt)) + fmt
            + b"data" + struct.pack("<I", 2) + b"\x00\x00"
        )
        path.write_bytes(riff)
        with pytest.raises(FormatError, match="codec"):
            load_wav(path)

    def test_missing_data_chunk(self, tmp_path):
        path = tmp_path / "nodata.wav"
        fmt = struct.pack("<HHIIHH", 1, 1, 8000, 16000, 2, 16)
        riff = b"RIFF" + struct.pack("<I", 20) + b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
        path.write_bytes(riff)
        with pytest.raises(FormatError, match="data chunk"):
            load_wav(path)


class TestScaleWaveform:
    def test_constant_one(self):
        out = scale_waveform(Waveform(np.ones(8), 22050))
        np.testing.assert_array_equal(out.samples, np.full(8, 256.0))

    def test_zeros(self):
        out = scale_waveform(Waveform(np.zeros(8), 22050))
        np.testing.assert_array_equal(out.samples, np.zeros(8))

    def test_random_elementwise(self, rng):
        x = rng.uniform(-1, 1, size=100)
        out = scale_waveform(Waveform(x, 22050))
        np.testing.assert_allclose(out.samples, 256.0 * x, atol=0)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            scale_waveform(Waveform(np.zeros(0), 22050))


class TestStft:
    def test_bin_center_sine_concentrates(self):
        sr = 22050
        k = 30
        spect = stft(Waveform(_sine(k * sr / 1024, sr), sr))
        assert np.all(spect.data.argmax(axis=1) == k)

    def test_zero_signal(self):
        spect = stft(Waveform(np.zeros(4096), 22050))
        np.testing.assert_array_equal(spect.data, np.zeros((7, 513)))

    def test_matches_naive_dft(self, rng):
        x = rng.normal(size=4096)
        got = stft(Waveform(x, 22050)).data
        np.testing.assert_allclose(got, _naive_dft_magnitudes(x), atol=1e-8)

    def test_frame_count_and_bins(self, rng):
        spect = stft(Waveform(rng.normal(size=3000), 22050))
        assert spect.data.shape == (1 + (3000 - 1024) // 512, 513)

    def test_short_signal_rejected(self):
        with pytest.raises(DimensionError):
            stft(Waveform(np.zeros(1000), 22050))


class TestLogmel:
    def test_zero_spectrogram_hits_log_floor(self):
        spect = stft(Waveform(np.zeros(2048), 44100))
        out = logmel_spectrogram(spect)
        np.testing.assert_allclose(out.data, np.log(1e-10), atol=1e-12)

    def test_filterbank_rows_positive_and_contiguous(self):
        for sr in (22050, 44100):
            fb = mel_filterbank(sr, 1024, 64)
            assert np.all(fb.sum(axis=1) > 0)
            for row in fb:
                nz = np.flatnonzero(row)
                assert np.array_equal(nz, np.arange(nz[0], nz[-1] + 1))

    def test_white_noise_matches_filterbank_oracle(self, rng):
        x = rng.normal(size=4096)
        spect = stft(Waveform(x, 44100))
        got = np.exp(logmel_spectrogram(spect).data) - 1e-10
        want = (_naive_dft_magnitudes(x) ** 2) @ _oracle_slaney_filterbank(44100, 1024, 64).T
        np.testing.assert_allclose(got, want, rtol=1e-8, atol=1e-10)

    def test_too_many_bands_rejected(self):
        spect = stft(Waveform(np.zeros(2048), 44100))
        with pytest.raises(ConfigError):
            logmel_spectrogram(spect, n_mels=600)

    def test_standardizer_roundtrip(self, rng):
        seqs = [
            FeatureSequence(rng.normal(loc=3.0, scale=2.0, size=(40, 5)), "logmel", 43.0)
            for _ in range(3)
        ]
        mean, std = fit_standardizer(seqs)
        outs = [apply_standardizer(s, mean, std) for s in seqs]
        stacked = np.concatenate([o.data for o in outs])
        np.testing.assert_allclose(stacked.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(stacked.std(axis=0), 1.0, atol=1e-12)


class TestExtractFeature:
    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            extract_feature("plp", Waveform(np.zeros(2048), 22050))

    def test_dims_per_kind(self, rng):
        w = Waveform(rng.normal(size=4096) * 0.1, 22050)
        for kind, dims in dsp.FEATURE_DIMS.items():
            seq = extract_feature(kind, w)
            assert seq.dims == dims, kind
            assert seq.frames == 7
            assert seq.frame_rate == 22050 / 512

    def test_mfcc_matches_independent_oracle(self, rng):
        x = rng.normal(size=3072)
        got = extract_feature("mfcc", Waveform(x, 22050)).data
        np.testing.assert_allclose(got, _oracle_mfcc(x, 22050), atol=1e-6)

    def test_rmse_of_constant(self):
        seq = extract_feature("rmse", Waveform(np.full(3072, -0.25), 22050))
        np.testing.assert_allclose(seq.data, 0.25, atol=1e-12)

    def test_centroid_tracks_pure_tone(self):
        sr = 22050
        seq = extract_feature("spectral_centroid", Waveform(_sine(997.0, sr), sr))
        assert np.all(np.abs(seq.data - 997.0) < sr / 1024)

    def test_chroma_a440_folds_to_pitch_class_a(self):
        sr = 22050
        seq = extract_feature("chroma_stft", Waveform(_sine(440.0, sr), sr))
        assert np.all(seq.data.argmax(axis=1) == 9)

    def test_chroma_scaling_by_power(self, rng):
        sr = 22050
        x = rng.normal(size=4096) * 0.1
        base = extract_feature("chroma_stft", Waveform(x, sr)).data
        scaled = extract_feature("chroma_stft", Waveform(3.7 * x, sr)).data
        np.testing.assert_allclose(scaled, 3.7 ** 2 * base, rtol=1e-9)

    def test_rmse_scaling_linear(self, rng):
        x = rng.normal(size=4096) * 0.1
        base = extract_feature("rmse", Waveform(x, 22050)).data
        scaled = extract_feature("rmse", Waveform(3.7 * x, 22050)).data
        np.testing.assert_allclose(scaled, 3.7 * base, rtol=1e-9)

    def test_centroid_scale_invariant(self, rng):
        x = rng.normal(size=4096) * 0.1
        base = extract_feature("spectral_centroid", Waveform(x, 22050)).data
        scaled = extract_feature("spectral_centroid", Waveform(3.7 * x, 22050)).data
        np.testing.assert_allclose(scaled, base, rtol=1e-9)

    def test_cens_frames_unit_or_zero(self, rng):
        x = rng.normal(size=6144) * 0.1
        norms = np.sqrt((extract_feature("chroma_cens", Waveform(x, 22050)).data ** 2).sum(axis=1))
        assert np.all((np.abs(norms - 1.0) < 1e-9) | (norms == 0.0))

    def test_cens_of_silence_is_zero(self):
        seq = extract_feature("chroma_cens", Waveform(np.zeros(3072), 22050))
        np.testing.assert_array_equal(seq.data, np.zeros((5, 12)))

    def test_contrast_tone_band_stands_out(self):
        sr = 22050
        seq = extract_feature("spectral_contrast", Waveform(_sine(1000.0, sr), sr))
        assert seq.dims == 7
        assert np.all(seq.data[:, 3] > 20.0)  # 1000 Hz sits in the 800-1600 band

    def test_tonnetz_matches_sin_cos_oracle(self, rng):
        sr = 22050
        x = rng.normal(size=3072) * 0.1
        got = extract_feature("tonnetz", Waveform(x, sr)).data
        chroma = extract_feature("chroma_stft", Waveform(x, sr)).data
        normed = chroma / chroma.sum(axis=1, keepdims=True)
        basis = np.zeros((6, 12))
        for c in range(12):
            basis[0, c] = math.sin(c * 7.0 * math.pi / 6.0)
            basis[1, c] = math.cos(c * 7.0 * math.pi / 6.0)
            basis[2, c] = math.sin(c * 3.0 * math.pi / 2.0)
            basis[3, c] = math.cos(c * 3.0 * math.pi / 2.0)
            basis[4, c] = 0.5 * math.sin(c * 2.0 * math.pi / 3.0)
            basis[5, c] = 0.5 * math.cos(c * 2.0 * math.pi / 3.0)
        want = normed @ basis.T
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_extractors_are_pure(self, rng):
        x = rng.normal(size=3072) * 0.1
        for kind in dsp.FEATURE_KINDS:
            a = extract_feature(kind, Waveform(x, 22050)).data
            b = extract_feature(kind, Waveform(x.copy(), 22050)).data
            assert a.tobytes() == b.tobytes(), kind
