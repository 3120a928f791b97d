"""Fusion head: context Bi-LSTMs over each modality's per-utterance
vectors within a video, dot-product attention of an audio-derived query
against both context sequences, and a softmax classifier over the
concatenation of the two fusion vectors with the branch vectors.

Branch vectors have different widths, so both context sequences and
the query are first mapped into one shared space; the attention dot
products and the weighted sums live there.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .audio import AudioBranch, AudioSentimentVector
from .errors import ConfigError, ContractError, DataError, DimensionError
from .layers import DenseParams, LstmParams, bilstm_encode, dense_forward
from .tensor import Tensor
from .text import TextBranch, TextSentimentVector, tokenize


class FusionConfig:
    def __init__(self, n_classes=2, context_hidden=100, shared_width=100):
        if n_classes < 2:
            raise ConfigError(f"need at least two classes, got {n_classes}")
        if context_hidden < 1 or shared_width < 1:
            raise ConfigError("context and shared widths must be positive")
        self.n_classes = n_classes
        self.context_hidden = context_hidden
        self.shared_width = shared_width


class FusionParams:
    """Classifier weights: logits = concat(Z_a, Z_t, ASV, TSV) M + b."""

    def __init__(self, concat_width: int, n_classes: int, rng):
        if concat_width < 1:
            raise ConfigError(f"concat width must be positive, got {concat_width}")
        bound = 1.0 / np.sqrt(concat_width)
        self.concat_width = concat_width
        self.n_classes = n_classes
        self.m = Tensor(rng.uniform(-bound, bound, size=(concat_width, n_classes)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(n_classes), requires_grad=True)

    def parameters(self, prefix=""):
        return {prefix + "m": self.m, prefix + "b": self.b}


class FusedPrediction:
    def __init__(self, probabilities: Tensor, label: int, z_a, z_t,
                 audio_weights=None, text_weights=None, utterance_id=None,
                 gold=None):
        total = probabilities.data.sum()
        if abs(total - 1.0) > 1e-9:
            raise ContractError(f"probabilities sum to {total!r}, not 1")
        for name, w in (("audio", audio_weights), ("text", text_weights)):
            if w is not None and abs(w.sum() - 1.0) > 1e-6:
                raise ContractError(f"{name} attention weights sum to {w.sum()!r}")
        self.probabilities = probabilities
        self.label = int(label)
        self.z_a = z_a
        self.z_t = z_t
        self.audio_weights = audio_weights
        self.text_weights = text_weights
        self.utterance_id = utterance_id
        self.gold = gold


def modality_attention(e: Tensor, hidden: Tensor):
    """Softmax over timesteps of e·h_t; returns the weights and the
    weighted sum of hidden states."""
    if e.ndim != 1 or hidden.ndim != 2 or hidden.shape[1] != e.shape[0]:
        raise DimensionError(
            f"query width {e.shape} does not match hidden states {hidden.shape}"
        )
    if hidden.shape[0] == 0:
        raise ContractError("attention needs a nonempty sequence")
    scores = T.reshape(T.matmul(hidden, T.reshape(e, (e.shape[0], 1))),
                       (hidden.shape[0],))
    weights = T.softmax(scores)
    fused = T.reshape(T.matmul(T.reshape(weights, (1, hidden.shape[0])), hidden),
                      (hidden.shape[1],))
    return weights, fused


def classify_fused(params: FusionParams, asv: Tensor, tsv: Tensor,
                   z_a: Tensor, z_t: Tensor) -> FusedPrediction:
    """Concatenate fusion and branch vectors, apply the linear
    classifier and softmax; argmax ties resolve to the lowest index."""
    joined = T.concat([z_a, z_t, asv, tsv], axis=0)
    if joined.shape[0] != params.concat_width:
        raise DimensionError(
            f"classifier expects width {params.concat_width}, got {joined.shape[0]}"
        )
    logits = T.add(T.reshape(T.matmul(T.reshape(joined, (1, params.concat_width)),
                                      params.m), (params.n_classes,)),
                   params.b)
    probs = T.softmax(logits)
    label = int(np.argmax(probs.data))  # argmax returns the first maximum
    return FusedPrediction(probs, label, z_a.data.copy(), z_t.data.copy())


class FusedInput:
    """Featurized utterance ready for the fused forward pass."""

    def __init__(self, utterance_id, lstm_features, cnn_input, tokens,
                 pos_tags=None, gold=None):
        if lstm_features is None or cnn_input is None:
            raise DataError(f"utterance '{utterance_id}' is missing the audio modality")
        if not tokens:
            raise DataError(f"utterance '{utterance_id}' is missing the text modality")
        self.utterance_id = utterance_id
        self.lstm_features = lstm_features
        self.cnn_input = cnn_input
        self.tokens = tokens
        self.pos_tags = pos_tags
        self.gold = gold


class FusedModel:
    """Both branches plus the fusion machinery; one video (an ordered
    utterance sequence) is the inference unit."""

    def __init__(self, audio_branch: AudioBranch, text_branch: TextBranch,
                 provider, cfg: FusionConfig, rng):
        self.audio = audio_branch
        self.text = text_branch
        self.provider = provider
        self.cfg = cfg
        ch = cfg.context_hidden
        asv_w = audio_branch.cfg.asv_width
        tsv_w = text_branch.cfg.tsv_width
        self.ctx_audio_fwd = LstmParams(asv_w, ch, rng)
        self.ctx_audio_bwd = LstmParams(asv_w, ch, rng)
        self.ctx_text_fwd = LstmParams(tsv_w, ch, rng)
        self.ctx_text_bwd = LstmParams(tsv_w, ch, rng)
        self.proj_audio = DenseParams(2 * ch, cfg.shared_width, rng)
        self.proj_text = DenseParams(2 * ch, cfg.shared_width, rng)
        self.proj_query = DenseParams(asv_w, cfg.shared_width, rng)
        concat_width = 2 * cfg.shared_width + asv_w + tsv_w
        self.classifier = FusionParams(concat_width, cfg.n_classes, rng)

    def fusion_parameters(self, prefix=""):
        out = {}
        out.update(self.ctx_audio_fwd.parameters(prefix + "ctx_audio_fwd/"))
        out.update(self.ctx_audio_bwd.parameters(prefix + "ctx_audio_bwd/"))
        out.update(self.ctx_text_fwd.parameters(prefix + "ctx_text_fwd/"))
        out.update(self.ctx_text_bwd.parameters(prefix + "ctx_text_bwd/"))
        out.update(self.proj_audio.parameters(prefix + "proj_audio/"))
        out.update(self.proj_text.parameters(prefix + "proj_text/"))
        out.update(self.proj_query.parameters(prefix + "proj_query/"))
        out.update(self.classifier.parameters(prefix + "classifier/"))
        return out

    def parameters(self, prefix=""):
        out = {}
        out.update(self.audio.parameters(prefix + "audio/"))
        out.update(self.text.parameters(prefix + "text/"))
        out.update(self.fusion_parameters(prefix + "fusion/"))
        return out

    def state_arrays(self):
        """Everything a checkpoint needs: parameters plus batch-norm
        running statistics."""
        out = {name: t.data for name, t in self.parameters().items()}
        out.update(self.audio.conv.running_stats("audio/conv/"))
        return out

    def load_state_arrays(self, arrays: dict):
        expected = self.state_arrays()
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing or extra:
            raise ContractError(
                f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}"
            )
        for name, arr in arrays.items():
            target = expected[name]
            if target.shape != arr.shape:
                raise DimensionError(
                    f"state '{name}' has shape {arr.shape}, expected {target.shape}"
                )
            target[...] = arr

    def branch_vectors(self, item: FusedInput, mode="eval", rng=None):
        asv = self.audio.forward_asv(item.lstm_features, item.cnn_input,
                                     mode=mode, rng=rng)
        tsv = self.text.forward_tsv(self.provider, item.tokens, item.pos_tags,
                                    mode=mode, rng=rng)
        return asv, tsv

    def forward_video(self, items, mode="eval", rng=None):
        """Run both branches per utterance, encode each modality's
        vector sequence in context, attend with the audio query, and
        classify every utterance; returns one prediction per item."""
        if not items:
            raise ContractError("video has no utterances")
        pairs = [self.branch_vectors(it, mode=mode, rng=rng) for it in items]
        asv_seq = T.stack([a.values for a, _ in pairs])
        tsv_seq = T.stack([t.values for _, t in pairs])
        ctx_a = bilstm_encode(self.ctx_audio_fwd, self.ctx_audio_bwd, asv_seq)
        ctx_t = bilstm_encode(self.ctx_text_fwd, self.ctx_text_bwd, tsv_seq)
        shared_a = dense_forward(self.proj_audio, ctx_a)
        shared_t = dense_forward(self.proj_text, ctx_t)
        predictions = []
        for item, (asv, tsv) in zip(items, pairs):
            query = dense_forward(self.proj_query, asv.values)
            a_w, z_a = modality_attention(query, shared_a)
            t_w, z_t = modality_attention(query, shared_t)
            pred = classify_fused(self.classifier, asv.values, tsv.values, z_a, z_t)
            pred.audio_weights = a_w.data.copy()
            pred.text_weights = t_w.data.copy()
            pred.utterance_id = item.utterance_id
            pred.gold = item.gold
            predictions.append(pred)
        return predictions

    def predict_video(self, items):
        return self.forward_video(items, mode="eval")

    def predict_utterance(self, item: FusedInput):
        """Single utterance treated as a one-step context sequence."""
        return self.forward_video([item], mode="eval")[0]
