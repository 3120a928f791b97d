"""Audio branch: acoustic features through an LSTM path and a
spectrogram/raw-frame CNN path, attention over each, pair fusion into
a fixed-width audio sentiment vector.

The two paths produce vectors of different widths, so the pair fusion
first applies bias-free linear maps onto a shared width, scores the
pair with a single attention scorer, re-weights, combines (concatenate
by default, add behind a switch), and projects through a ReLU dense
layer.  Bias-free maps keep the zero-input case exact: zero branch
vectors land on the dense layer's bias image.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .dsp import FEATURE_KINDS, FeatureSequence, Waveform
from .errors import ConfigError, ContractError, DimensionError
from .layers import (
    Conv1dParams,
    ConvStack,
    DenseParams,
    DropoutSpec,
    LstmParams,
    bilstm_encode,
    dense_forward,
    dropout_apply,
)
from .tensor import Tensor

DEFAULT_FEATURE_KINDS = ("mfcc", "spectral_centroid", "chroma_stft", "spectral_contrast")


class AudioBranchConfig:
    def __init__(self, feature_kinds=DEFAULT_FEATURE_KINDS, lstm_hidden=200,
                 kernel_sizes=(3, 5, 7, 9), channels_per_kernel=200,
                 conv_stride=1, conv_padding="same", cnn_in_channels=64,
                 attention_width=100, asv_width=100, combine="concat",
                 dropout=0.4, conv_dropout=0.35, use_batchnorm=True):
        kinds = tuple(feature_kinds)
        if not kinds:
            raise ConfigError("need at least one acoustic feature kind")
        for k in kinds:
            if k not in FEATURE_KINDS:
                raise ConfigError(f"unknown feature kind '{k}'")
        if asv_width < 1:
            raise ConfigError(f"asv width must be positive, got {asv_width}")
        if combine not in ("concat", "add"):
            raise ConfigError(f"combine must be concat or add, got {combine!r}")
        self.feature_kinds = kinds
        self.lstm_hidden = lstm_hidden
        self.kernel_sizes = tuple(kernel_sizes)
        self.channels_per_kernel = channels_per_kernel
        self.conv_stride = conv_stride
        self.conv_padding = conv_padding
        self.cnn_in_channels = cnn_in_channels
        self.attention_width = attention_width
        self.asv_width = asv_width
        self.combine = combine
        self.dropout = dropout
        self.conv_dropout = conv_dropout
        self.use_batchnorm = use_batchnorm


class AttentionPool:
    """Score each row h_i by w·tanh(h_i) + b, softmax over rows, return
    the weights and the weighted sum of rows.

    The scalar bias b is kept for the affine scoring form but is not
    trainable: a shared offset on every score cancels in the softmax,
    so its gradient is identically zero."""

    def __init__(self, width: int, rng):
        bound = 1.0 / np.sqrt(width)
        self.width = width
        self.w = Tensor(rng.uniform(-bound, bound, size=(width, 1)), requires_grad=True)
        self.b = Tensor(np.zeros(1))

    def parameters(self, prefix=""):
        return {prefix + "w": self.w}

    def forward(self, hs: Tensor):
        if hs.ndim != 2 or hs.shape[1] != self.width:
            raise DimensionError(f"attention input must be (T, {self.width}), got {hs.shape}")
        if hs.shape[0] == 0:
            raise ContractError("attention needs a nonempty sequence")
        scores = T.add(T.reshape(T.matmul(T.tanh(hs), self.w), (hs.shape[0],)), self.b)
        weights = T.softmax(scores)
        pooled = T.reshape(T.matmul(T.reshape(weights, (1, hs.shape[0])), hs), (hs.shape[1],))
        return weights, pooled


class AudioSentimentVector:
    """Branch output: the vector plus every attention distribution
    produced on the way (kept for export)."""

    def __init__(self, values: Tensor, attention: dict):
        self.values = values
        self.attention = attention  # name -> numpy weights summing to 1

    @property
    def width(self):
        return self.values.shape[0]


class AudioBranch:
    def __init__(self, cfg: AudioBranchConfig, lstm_in_width: int, rng):
        self.cfg = cfg
        self.lstm_in_width = lstm_in_width
        h = cfg.lstm_hidden
        self.lstm_fwd = LstmParams(lstm_in_width, h, rng)
        self.lstm_bwd = LstmParams(lstm_in_width, h, rng)
        self.lstm_attention = AttentionPool(2 * h, rng)
        conv_cfg = Conv1dParams(cfg.kernel_sizes, cfg.channels_per_kernel,
                                cfg.conv_stride, cfg.conv_padding)
        self.conv = ConvStack(cfg.cnn_in_channels, conv_cfg, rng,
                              use_batchnorm=cfg.use_batchnorm)
        self.cnn_attention = AttentionPool(self.conv.out_width(), rng)
        a = cfg.attention_width
        bound_l = 1.0 / np.sqrt(2 * h)
        bound_c = 1.0 / np.sqrt(self.conv.out_width())
        # bias-free maps onto the shared pair-attention width
        self.proj_lstm = Tensor(rng.uniform(-bound_l, bound_l, size=(a, 2 * h)),
                                requires_grad=True)
        self.proj_cnn = Tensor(rng.uniform(-bound_c, bound_c, size=(a, self.conv.out_width())),
                               requires_grad=True)
        self.pair_attention = AttentionPool(a, rng)
        fused_width = 2 * a if cfg.combine == "concat" else a
        self.project = DenseParams(fused_width, cfg.asv_width, rng)

    def parameters(self, prefix=""):
        out = {}
        out.update(self.lstm_fwd.parameters(prefix + "lstm_fwd/"))
        out.update(self.lstm_bwd.parameters(prefix + "lstm_bwd/"))
        out.update(self.lstm_attention.parameters(prefix + "lstm_att/"))
        out.update(self.conv.parameters(prefix + "conv/"))
        out.update(self.cnn_attention.parameters(prefix + "cnn_att/"))
        out[prefix + "proj_lstm"] = self.proj_lstm
        out[prefix + "proj_cnn"] = self.proj_cnn
        out.update(self.pair_attention.parameters(prefix + "pair_att/"))
        out.update(self.project.parameters(prefix + "project/"))
        return out

    def lstm_branch_forward(self, features: Tensor):
        """Bi-LSTM over the concatenated acoustic features, then
        attention pooling; returns (hidden sequence, pooled vector,
        weights)."""
        if features.ndim != 2 or features.shape[0] == 0:
            raise ContractError(f"need nonempty (T, D) features, got {features.shape}")
        hidden = bilstm_encode(self.lstm_fwd, self.lstm_bwd, features)
        weights, pooled = self.lstm_attention.forward(hidden)
        return hidden, pooled, weights

    def cnn_branch_forward(self, spect: Tensor, mode="train", rng=None):
        """Multi-kernel convolution over the spectrogram-like input,
        then temporal attention pooling; returns (feature maps, pooled
        vector, weights)."""
        maps = self.conv.forward(spect, mode=mode)
        if mode == "train" and self.cfg.conv_dropout > 0.0 and rng is not None:
            maps = dropout_apply(DropoutSpec(self.cfg.conv_dropout, "train"), maps, rng)
        weights, pooled = self.cnn_attention.forward(maps)
        return maps, pooled, weights

    def fuse_audio_features(self, lstm_vec: Tensor, cnn_vec: Tensor,
                            mode="eval", rng=None):
        """Pair attention over the two branch vectors, combine, project."""
        lp = T.reshape(T.matmul(self.proj_lstm, T.reshape(lstm_vec, (lstm_vec.shape[0], 1))),
                       (self.cfg.attention_width,))
        cp = T.reshape(T.matmul(self.proj_cnn, T.reshape(cnn_vec, (cnn_vec.shape[0], 1))),
                       (self.cfg.attention_width,))
        pair = T.stack([lp, cp])
        weights, _ = self.pair_attention.forward(pair)
        scaled = T.mul(pair, T.reshape(weights, (2, 1)))
        if self.cfg.combine == "concat":
            combined = T.reshape(scaled, (2 * self.cfg.attention_width,))
        else:
            combined = T.add(T.narrow(scaled, 0, 0, 1), T.narrow(scaled, 0, 1, 1))
            combined = T.reshape(combined, (self.cfg.attention_width,))
        if mode == "train" and self.cfg.dropout > 0.0 and rng is not None:
            combined = dropout_apply(DropoutSpec(self.cfg.dropout, "train"), combined, rng)
        projected = dense_forward(self.project, combined, activation="relu")
        return projected, weights

    def forward_asv(self, features: Tensor, spect: Tensor, mode="eval", rng=None):
        """Full branch: both paths, pair fusion; returns the sentiment
        vector with its attention trail."""
        _, lstm_vec, a_lstm = self.lstm_branch_forward(features)
        _, cnn_vec, a_cnn = self.cnn_branch_forward(spect, mode=mode, rng=rng)
        values, a_pair = self.fuse_audio_features(lstm_vec, cnn_vec, mode=mode, rng=rng)
        return AudioSentimentVector(values, {
            "lstm": a_lstm.data.copy(),
            "cnn": a_cnn.data.copy(),
            "pair": a_pair.data.copy(),
        })


def concat_feature_kinds(sequences) -> Tensor:
    """Join per-kind (frames, dims) matrices side by side; frame counts
    must agree."""
    if not sequences:
        raise ContractError("no feature sequences given")
    frames = sequences[0].data.shape[0]
    for s in sequences:
        if s.data.shape[0] != frames:
            raise DimensionError(
                f"frame count mismatch: {s.kind} has {s.data.shape[0]}, want {frames}"
            )
    return Tensor(np.concatenate([s.data for s in sequences], axis=1))


def raw_frame_sequence(w: Waveform, frame: int = 1024) -> FeatureSequence:
    """Non-overlapping frames of the scaled waveform, for the CNN path's
    raw route; frames shorter than ``frame`` at the tail are dropped."""
    n = len(w) // frame
    if n == 0:
        raise DimensionError(f"waveform of {len(w)} samples gives no {frame}-sample frames")
    data = w.samples[: n * frame].reshape(n, frame)
    return FeatureSequence(data, "raw_frames", w.sample_rate / frame)
