"""Deterministic acoustic front end.

Waveform ingestion (RIFF/WAVE), short-time Fourier magnitudes, mel
filterbank log energies, and the acoustic feature families (mfcc,
chroma_stft, chroma_cens, spectral_centroid, spectral_contrast, rmse,
tonnetz).  Everything here is a pure function of its inputs: no RNG, no
global state, bit-identical output for identical input.

Frame conventions: window 1024 samples, hop 512, no implicit padding;
frame t covers samples [t*hop, t*hop + window).
"""

from __future__ import annotations

import struct
import wave

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, FormatError

DEFAULT_WINDOW = 1024
DEFAULT_HOP = 512

FEATURE_KINDS = (
    "mfcc",
    "chroma_stft",
    "chroma_cens",
    "spectral_centroid",
    "spectral_contrast",
    "rmse",
    "tonnetz",
)

FEATURE_DIMS = {
    "mfcc": 13,
    "chroma_stft": 12,
    "chroma_cens": 12,
    "spectral_centroid": 1,
    "spectral_contrast": 7,
    "rmse": 1,
    "tonnetz": 6,
}

_LOG_FLOOR = 1e-10


class Waveform:
    """Mono float64 samples plus their sample rate."""

    def __init__(self, samples, sample_rate: int):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ContractError(f"waveform must be 1-D, got shape {samples.shape}")
        if sample_rate <= 0:
            raise ContractError(f"sample rate must be positive, got {sample_rate}")
        self.samples = samples
        self.sample_rate = int(sample_rate)

    def __len__(self):
        return self.samples.shape[0]


class Spectrogram:
    """Magnitude STFT frames: (frames, window//2 + 1)."""

    def __init__(self, data, window: int, hop: int, sample_rate: int,
                 window_name="hann"):
        self.data = np.asarray(data, dtype=np.float64)
        self.window = window
        self.hop = hop
        self.sample_rate = sample_rate
        self.window_name = window_name


class FeatureSequence:
    """Time-major feature matrix (frames, dims) with its kind and the
    frame rate in frames per second."""

    def __init__(self, data, kind: str, frame_rate: float):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2:
            raise ContractError(f"feature data must be (frames, dims), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ContractError(f"non-finite values in '{kind}' features")
        self.data = data
        self.kind = kind
        self.frame_rate = float(frame_rate)

    @property
    def frames(self):
        return self.data.shape[0]

    @property
    def dims(self):
        return self.data.shape[1]


def load_wav(path) -> Waveform:
    """Parse a RIFF/WAVE file: PCM 16-bit or IEEE float32, one or two
    channels.  Samples come back in [-1, 1]; stereo is averaged down.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[0:4] != b"RIFF":
        raise FormatError(f"{path}: not a RIFF container (offset 0)")
    if blob[8:12] != b"WAVE":
        raise FormatError(f"{path}: missing WAVE tag (offset 8)")
    pos = 12
    fmt = None
    data = None
    data_offset = None
    while pos + 8 <= len(blob):
        cid = blob[pos : pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body = blob[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"{path}: truncated chunk {cid!r} (offset {pos})")
        if cid == b"fmt ":
            if size < 16:
                raise FormatError(f"{path}: short fmt chunk (offset {pos})")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            data = body
            data_offset = pos + 8
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise FormatError(f"{path}: fmt chunk not found (offset {pos})")
    if data is None:
        raise FormatError(f"{path}: data chunk not found (offset {pos})")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if channels not in (1, 2):
        raise FormatError(f"{path}: {channels} channels unsupported (offset {data_offset})")
    if audio_format == 1 and bits == 16:
        raw = np.frombuffer(data[: len(data) - len(data) % 2], dtype="<i2")
        samples = raw.astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        raw = np.frombuffer(data[: len(data) - len(data) % 4], dtype="<f4")
        samples = raw.astype(np.float64)
    else:
        raise FormatError(
            f"{path}: codec {audio_format}/{bits}-bit unsupported (offset {data_offset})"
        )
    if channels == 2:
        samples = samples[: len(samples) - len(samples) % 2].reshape(-1, 2).mean(axis=1)
    return Waveform(samples, sample_rate)


def write_wav(path, samples, sample_rate: int):
    """Write mono PCM16; input floats are clipped to [-1, 1]."""
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(sample_rate))
        fh.writeframes(pcm.tobytes())


def scale_waveform(w: Waveform) -> Waveform:
    """Map the [-1, 1] normalization onto [-256, 256]; no mean removal."""
    if len(w) == 0:
        raise ContractError("cannot scale an empty waveform")
    return Waveform(w.samples * 256.0, w.sample_rate)


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window (the STFT convention)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(samples: np.ndarray, window: int, hop: int) -> np.ndarray:
    if samples.shape[0] < window:
        raise DimensionError(
            f"signal of {samples.shape[0]} samples is shorter than the {window} window"
        )
    count = 1 + (samples.shape[0] - window) // hop
    out = np.empty((count, window))
    for t in range(count):
        out[t] = samples[t * hop : t * hop + window]
    return out


def stft(w: Waveform, window: int = DEFAULT_WINDOW, hop: int = DEFAULT_HOP) -> Spectrogram:
    """Hann-windowed magnitude STFT; frames = 1 + (len - window) // hop."""
    frames = frame_signal(w.samples, window, hop)
    mags = np.abs(np.fft.rfft(frames * hann_window(window), axis=1))
    return Spectrogram(mags, window, hop, w.sample_rate)


def _hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    logstep = np.log(6.4) / 27.0
    mel = f / f_sp
    log_part = f >= min_log_hz
    mel = np.where(log_part, min_log_hz / f_sp + np.log(np.maximum(f, 1e-30) / min_log_hz) / logstep, mel)
    return mel


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3.0
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    hz = m * f_sp
    log_part = m >= min_log_mel
    return np.where(log_part, min_log_hz * np.exp(logstep * (m - min_log_mel)), hz)


def mel_filterbank(sr: int, n_fft: int, n_mels: int) -> np.ndarray:
    """Triangular filters on the mel scale (linear below 1 kHz, log
    above), area-normalized, spanning 0..sr/2; shape (n_mels, bins).
    """
    bins = 1 + n_fft // 2
    fft_freqs = np.linspace(0.0, sr / 2.0, bins)
    mel_pts = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sr / 2.0), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, bins))
    for m in range(n_mels):
        lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (fft_freqs - lo) / (mid - lo)
        falling = (hi - fft_freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
        fb[m] *= 2.0 / (hi - lo)  # area normalization keeps bands comparable
    return fb


def logmel_spectrogram(s: Spectrogram, n_mels: int = 64, sr=None) -> FeatureSequence:
    """Mel-band log energies of the power spectrum, un-standardized."""
    sr = s.sample_rate if sr is None else sr
    bins = s.data.shape[1]
    if n_mels > bins:
        raise ConfigError(f"{n_mels} mel bands exceed the {bins} spectrum bins")
    fb = mel_filterbank(sr, s.window, n_mels)
    mel_power = (s.data ** 2) @ fb.T
    return FeatureSequence(np.log(mel_power + _LOG_FLOOR), "logmel", sr / s.hop)


def fit_standardizer(sequences) -> tuple:
    """Per-dimension mean and standard deviation over all frames of the
    given sequences (the training population); std is floored to keep
    constant dimensions harmless.
    """
    if not sequences:
        raise ContractError("need at least one sequence to fit a standardizer")
    stacked = np.concatenate([s.data for s in sequences], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), 1e-12)
    return mean, std


def apply_standardizer(seq: FeatureSequence, mean, std) -> FeatureSequence:
    return FeatureSequence((seq.data - mean) / std, seq.kind, seq.frame_rate)


def _dct_ii_ortho_matrix(n: int, k: int) -> np.ndarray:
    """First k rows of the orthonormal DCT-II basis over n points."""
    rows = np.arange(k)[:, None]
    cols = np.arange(n)[None, :]
    mat = np.cos(np.pi * rows * (2 * cols + 1) / (2.0 * n))
    mat *= np.sqrt(2.0 / n)
    mat[0] *= np.sqrt(0.5)
    return mat


def _mfcc(spect: Spectrogram, n_mels=64, n_coeff=13):
    logmel = logmel_spectrogram(spect, n_mels=n_mels)
    dct = _dct_ii_ortho_matrix(n_mels, n_coeff)
    return logmel.data @ dct.T


def _fold_chroma(spect: Spectrogram) -> np.ndarray:
    """Pitch-class power folding: each non-DC bin lands on the class of
    its nearest equal-tempered note (class 0 = C, so A440 folds to 9).
    """
    bins = spect.data.shape[1]
    freqs = np.linspace(0.0, spect.sample_rate / 2.0, bins)
    c4 = 261.6255653005986
    classes = np.zeros(bins, dtype=np.int64)
    classes[1:] = np.mod(np.round(12.0 * np.log2(freqs[1:] / c4)).astype(np.int64), 12)
    power = spect.data ** 2
    out = np.zeros((power.shape[0], 12))
    for pc in range(12):
        cols = (classes == pc) & (np.arange(bins) > 0)
        out[:, pc] = power[:, cols].sum(axis=1)
    return out


def _chroma_cens(spect: Spectrogram) -> np.ndarray:
    chroma = _fold_chroma(spect)
    sums = chroma.sum(axis=1, keepdims=True)
    normed = np.divide(chroma, sums, out=np.zeros_like(chroma), where=sums > 0)
    quant = np.zeros_like(normed)
    for thresh in (0.05, 0.1, 0.2, 0.4):
        quant += 0.25 * (normed > thresh)
    # 41-frame effective Hann smoothing (the symmetric 43-point window
    # has zero ends), zero-padded at the edges.
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(43) / 42.0)
    win /= win.sum()
    smoothed = np.empty_like(quant)
    half = 21
    padded = np.concatenate([np.zeros((half, 12)), quant, np.zeros((half, 12))])
    for t in range(quant.shape[0]):
        smoothed[t] = win @ padded[t : t + 43]
    norms = np.sqrt((smoothed ** 2).sum(axis=1, keepdims=True))
    return np.divide(smoothed, norms, out=np.zeros_like(smoothed), where=norms > 0)


def _spectral_centroid(spect: Spectrogram) -> np.ndarray:
    bins = spect.data.shape[1]
    freqs = np.linspace(0.0, spect.sample_rate / 2.0, bins)
    sums = spect.data.sum(axis=1, keepdims=True)
    weights = np.divide(spect.data, sums, out=np.zeros_like(spect.data), where=sums > 0)
    return (weights @ freqs)[:, None]


def _spectral_contrast(spect: Spectrogram, fmin=200.0, n_bands=6, quantile=0.02):
    bins = spect.data.shape[1]
    freqs = np.linspace(0.0, spect.sample_rate / 2.0, bins)
    edges = np.zeros(n_bands + 2)
    edges[1:] = fmin * (2.0 ** np.arange(n_bands + 1))
    out = np.zeros((spect.data.shape[0], n_bands + 1))
    for k in range(n_bands + 1):
        member = (freqs >= edges[k]) & (freqs <= edges[k + 1])
        idx = np.flatnonzero(member)
        if idx.size == 0:
            raise ConfigError(
                f"octave band {k} ({edges[k]:.0f}-{edges[k + 1]:.0f} Hz) has no "
                f"spectrum bins at sample rate {spect.sample_rate}"
            )
        if k > 0:
            member[idx[0] - 1] = True
        if k == n_bands:
            member[idx[-1] + 1 :] = True
        sub = np.sort(spect.data[:, member], axis=1)
        take = max(int(round(quantile * sub.shape[1])), 1)
        valley = sub[:, :take].mean(axis=1)
        peak = sub[:, -take:].mean(axis=1)
        out[:, k] = 10.0 * np.log10(np.maximum(peak, _LOG_FLOOR)) - 10.0 * np.log10(
            np.maximum(valley, _LOG_FLOOR)
        )
    return out


def _rmse(samples: np.ndarray, window: int, hop: int) -> np.ndarray:
    frames = frame_signal(samples, window, hop)
    return np.sqrt((frames ** 2).mean(axis=1))[:, None]


_TONNETZ_BASIS = None


def _tonnetz_basis() -> np.ndarray:
    """(6, 12) projection: fifths, minor thirds, major thirds as
    sine/cosine pairs over the pitch-class circle."""
    global _TONNETZ_BASIS
    if _TONNETZ_BASIS is None:
        dim_map = np.linspace(0, 12, num=12, endpoint=False)
        scale = np.array([7.0 / 6, 7.0 / 6, 3.0 / 2, 3.0 / 2, 2.0 / 3, 2.0 / 3])
        v = np.multiply.outer(scale, dim_map)
        v[::2] -= 0.5
        radii = np.array([1.0, 1.0, 1.0, 1.0, 0.5, 0.5])
        _TONNETZ_BASIS = radii[:, None] * np.cos(np.pi * v)
    return _TONNETZ_BASIS


def _tonnetz(spect: Spectrogram) -> np.ndarray:
    chroma = _fold_chroma(spect)
    sums = chroma.sum(axis=1, keepdims=True)
    normed = np.divide(chroma, sums, out=np.zeros_like(chroma), where=sums > 0)
    return normed @ _tonnetz_basis().T


def extract_feature(kind: str, w: Waveform, window: int = DEFAULT_WINDOW,
                    hop: int = DEFAULT_HOP, n_mels: int = 64) -> FeatureSequence:
    """Compute one acoustic feature family over the waveform's frames."""
    if kind not in FEATURE_KINDS:
        raise ConfigError(f"unknown feature kind '{kind}' (choose from {FEATURE_KINDS})")
    if kind == "rmse":
        data = _rmse(w.samples, window, hop)
    else:
        spect = stft(w, window, hop)
        if kind == "mfcc":
            data = _mfcc(spect, n_mels=n_mels)
        elif kind == "chroma_stft":
            data = _fold_chroma(spect)
        elif kind == "chroma_cens":
            data = _chroma_cens(spect)
        elif kind == "spectral_centroid":
            data = _spectral_centroid(spect)
        elif kind == "spectral_contrast":
            data = _spectral_contrast(spect)
        else:
            data = _tonnetz(spect)
    return FeatureSequence(data, kind, w.sample_rate / hop)
