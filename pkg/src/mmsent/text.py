"""Text branch: embedding lookup (optionally with POS one-hots),
Bi-LSTM encoding, attention re-weighting of the hidden sequence, a
multi-kernel convolution over the re-weighted sequence with temporal
max-pooling, and a dense projection to the text sentiment vector.

The attention stage returns both the per-step weighted sequence (fed
to the convolution) and its sum (a pooled vector); which of the three
candidate sources feeds the final projection is configurable, with the
convolutional route as the default.
"""

from __future__ import annotations

import re

import numpy as np

from . import tensor as T
from .audio import AttentionPool
from .dsp import FeatureSequence
from .errors import ConfigError, ContractError, DataError, DimensionError
from .layers import (
    Conv1dParams,
    DenseParams,
    DropoutSpec,
    LstmParams,
    bilstm_encode,
    conv1d,
    dense_forward,
    dropout_apply,
)
from .tensor import Tensor

UNKNOWN_TOKEN = "<unk>"

# coarse tagset; PUNCT only ever arrives via manifest-supplied tags
# since the tokenizer drops punctuation
POS_TAGS = ("NOUN", "VERB", "ADJ", "ADV", "PRON", "DET", "ADP",
            "NUM", "CONJ", "PRT", "PUNCT", "X")
_POS_INDEX = {t: i for i, t in enumerate(POS_TAGS)}

_TOKEN_RE = re.compile(r"[a-z0-9']+")

_PRONOUNS = {"i", "you", "he", "she", "it", "we", "they", "me", "him", "her",
             "us", "them", "my", "your", "his", "its", "our", "their", "this",
             "that", "these", "those", "who", "what", "myself", "himself",
             "herself", "itself"}
_DETERMINERS = {"the", "a", "an", "some", "any", "no", "every", "each",
                "either", "neither", "all", "both"}
_ADPOSITIONS = {"in", "on", "at", "by", "for", "with", "about", "against",
                "between", "into", "through", "during", "before", "after",
                "above", "below", "from", "up", "down", "of", "off", "over",
                "under", "to"}
_CONJUNCTIONS = {"and", "or", "but", "nor", "so", "yet", "because", "although",
                 "while", "if", "unless", "since", "when"}
_PARTICLES = {"not", "n't", "'s", "out"}
_VERBS = {"is", "am", "are", "was", "were", "be", "been", "being", "do",
          "does", "did", "have", "has", "had", "can", "could", "will",
          "would", "shall", "should", "may", "might", "must", "go", "goes",
          "went", "get", "got", "make", "made", "say", "said", "think",
          "know", "feel", "felt", "like", "love", "hate", "want", "enjoyed"}
_ADJ_SUFFIXES = ("ful", "ous", "ive", "able", "ible", "al", "ish", "less", "est")
_VERB_SUFFIXES = ("ing", "ed", "ize", "ise", "ate")


def tokenize(text: str):
    """Lowercase and split on whitespace and punctuation; apostrophes
    survive inside contractions."""
    tokens = []
    for raw in _TOKEN_RE.findall(text.lower()):
        tok = raw.strip("'")
        if tok:
            tokens.append(tok)
    return tokens


def rule_pos_tags(tokens):
    """Rule-based coarse tagging: closed-class lists first, then digit
    and suffix heuristics, noun as the fallback."""
    tags = []
    for tok in tokens:
        if tok in _PRONOUNS:
            tags.append("PRON")
        elif tok in _DETERMINERS:
            tags.append("DET")
        elif tok in _ADPOSITIONS:
            tags.append("ADP")
        elif tok in _CONJUNCTIONS:
            tags.append("CONJ")
        elif tok in _PARTICLES:
            tags.append("PRT")
        elif tok in _VERBS:
            tags.append("VERB")
        elif any(c.isdigit() for c in tok):
            tags.append("NUM")
        elif tok.endswith("ly"):
            tags.append("ADV")
        elif tok.endswith(_VERB_SUFFIXES):
            tags.append("VERB")
        elif tok.endswith(_ADJ_SUFFIXES):
            tags.append("ADJ")
        elif tok.isalpha() or "'" in tok:
            tags.append("NOUN")
        else:
            tags.append("X")
    return tags


def pos_one_hot(tag: str) -> np.ndarray:
    if tag not in _POS_INDEX:
        raise DataError(f"unknown POS tag '{tag}', expected one of {', '.join(POS_TAGS)}")
    vec = np.zeros(len(POS_TAGS))
    vec[_POS_INDEX[tag]] = 1.0
    return vec


class EmbeddingProvider:
    """Token to vector table with a guaranteed unknown-token fallback."""

    def __init__(self, table: dict, unknown_token: str = UNKNOWN_TOKEN):
        if not table:
            raise ConfigError("embedding table is empty")
        vectors = {}
        width = None
        for token, vec in table.items():
            arr = np.asarray(vec, dtype=np.float64)
            if arr.ndim != 1:
                raise ConfigError(f"embedding for '{token}' must be a vector, got {arr.shape}")
            if width is None:
                width = arr.shape[0]
            elif arr.shape[0] != width:
                raise ConfigError(
                    f"embedding width mismatch: '{token}' has {arr.shape[0]}, expected {width}"
                )
            vectors[token] = arr
        self.vectors = vectors
        self.width = width
        self.unknown = vectors.get(unknown_token, np.zeros(width))

    def lookup(self, token: str) -> np.ndarray:
        return self.vectors.get(token, self.unknown)

    def __contains__(self, token):
        return token in self.vectors

    def __len__(self):
        return len(self.vectors)


def embed_tokens(provider: EmbeddingProvider, tokens, pos_tags=None) -> FeatureSequence:
    """One embedding row per token; unknown tokens fall back to the
    provider's unknown vector.  When ``pos_tags`` is given (one tag per
    token), its one-hot rows are concatenated on the right."""
    if not tokens:
        raise ContractError("token list is empty")
    rows = np.stack([provider.lookup(tok) for tok in tokens])
    if pos_tags is not None:
        if len(pos_tags) != len(tokens):
            raise DataError(
                f"got {len(pos_tags)} POS tags for {len(tokens)} tokens"
            )
        hots = np.stack([pos_one_hot(t) for t in pos_tags])
        rows = np.concatenate([rows, hots], axis=1)
    return FeatureSequence(rows, "embeddings", 1.0)


class TextBranchConfig:
    def __init__(self, embedding_width=16, use_pos_tags=False, lstm_hidden=150,
                 kernel_sizes=(3, 5), channels_per_kernel=100, conv_padding="same",
                 tsv_width=100, tsv_source="conv", dropout=0.4):
        if embedding_width < 1:
            raise ConfigError(f"embedding width must be positive, got {embedding_width}")
        if tsv_width < 1:
            raise ConfigError(f"tsv width must be positive, got {tsv_width}")
        if tsv_source not in ("conv", "pooled", "last"):
            raise ConfigError(f"tsv_source must be conv, pooled or last, got {tsv_source!r}")
        self.embedding_width = embedding_width
        self.use_pos_tags = use_pos_tags
        self.lstm_hidden = lstm_hidden
        self.kernel_sizes = tuple(kernel_sizes)
        self.channels_per_kernel = channels_per_kernel
        self.conv_padding = conv_padding
        self.tsv_width = tsv_width
        self.tsv_source = tsv_source
        self.dropout = dropout

    @property
    def input_width(self):
        return self.embedding_width + (len(POS_TAGS) if self.use_pos_tags else 0)


class TextSentimentVector:
    def __init__(self, values: Tensor, attention: np.ndarray):
        self.values = values
        self.attention = attention  # per-token weights summing to 1

    @property
    def width(self):
        return self.values.shape[0]


def attend_text(pool: AttentionPool, hidden: Tensor):
    """Re-weight a hidden sequence: returns (weights a, weighted
    sequence with rows a_i*h_i, pooled sum of those rows)."""
    weights, pooled = pool.forward(hidden)
    seq = T.mul(hidden, T.reshape(weights, (hidden.shape[0], 1)))
    return weights, seq, pooled


class TextBranch:
    def __init__(self, cfg: TextBranchConfig, rng):
        self.cfg = cfg
        h = cfg.lstm_hidden
        self.lstm_fwd = LstmParams(cfg.input_width, h, rng)
        self.lstm_bwd = LstmParams(cfg.input_width, h, rng)
        self.attention = AttentionPool(2 * h, rng)
        self.conv_cfg = Conv1dParams(cfg.kernel_sizes, cfg.channels_per_kernel,
                                     stride=1, padding=cfg.conv_padding)
        self.conv_weights = []
        self.conv_biases = []
        for k in cfg.kernel_sizes:
            bound = 1.0 / np.sqrt(k * 2 * h)
            w = Tensor(rng.uniform(-bound, bound, size=(k, 2 * h, cfg.channels_per_kernel)),
                       requires_grad=True)
            b = Tensor(rng.uniform(-bound, bound, size=cfg.channels_per_kernel),
                       requires_grad=True)
            self.conv_weights.append(w)
            self.conv_biases.append(b)
        source_width = {
            "conv": len(cfg.kernel_sizes) * cfg.channels_per_kernel,
            "pooled": 2 * h,
            "last": 2 * h,
        }[cfg.tsv_source]
        self.project = DenseParams(source_width, cfg.tsv_width, rng)

    def parameters(self, prefix=""):
        out = {}
        out.update(self.lstm_fwd.parameters(prefix + "lstm_fwd/"))
        out.update(self.lstm_bwd.parameters(prefix + "lstm_bwd/"))
        out.update(self.attention.parameters(prefix + "att/"))
        for k, w, b in zip(self.cfg.kernel_sizes, self.conv_weights, self.conv_biases):
            out[prefix + f"conv/k{k}_w"] = w
            out[prefix + f"conv/k{k}_b"] = b
        out.update(self.project.parameters(prefix + "project/"))
        return out

    def conv_text_features(self, seq: Tensor) -> Tensor:
        """Each kernel width convolves the weighted sequence, max-pools
        over time, and the pooled channels are concatenated."""
        if self.cfg.conv_padding == "valid" and seq.shape[0] < max(self.cfg.kernel_sizes):
            raise DimensionError(
                f"sequence of {seq.shape[0]} steps is shorter than kernel "
                f"{max(self.cfg.kernel_sizes)} under valid padding"
            )
        pooled = []
        for w, b in zip(self.conv_weights, self.conv_biases):
            maps = conv1d(seq, w, b, stride=1, padding=self.cfg.conv_padding)
            pooled.append(T.max_(maps, axis=0))
        return T.concat(pooled, axis=0)

    def forward_tsv(self, provider: EmbeddingProvider, tokens, pos_tags=None,
                    mode="eval", rng=None) -> TextSentimentVector:
        if not tokens:
            raise ContractError("token list is empty")
        if self.cfg.use_pos_tags and pos_tags is None:
            pos_tags = rule_pos_tags(tokens)
        if not self.cfg.use_pos_tags:
            pos_tags = None
        emb = embed_tokens(provider, tokens, pos_tags)
        xs = Tensor(emb.data)
        hidden = bilstm_encode(self.lstm_fwd, self.lstm_bwd, xs)
        weights, seq, pooled = attend_text(self.attention, hidden)
        if self.cfg.tsv_source == "conv":
            source = self.conv_text_features(seq)
        elif self.cfg.tsv_source == "pooled":
            source = pooled
        else:
            source = T.reshape(T.narrow(hidden, 0, hidden.shape[0] - 1, 1),
                               (hidden.shape[1],))
        if mode == "train" and self.cfg.dropout > 0.0 and rng is not None:
            source = dropout_apply(DropoutSpec(self.cfg.dropout, "train"), source, rng)
        values = dense_forward(self.project, source, activation="relu")
        return TextSentimentVector(values, weights.data.copy())
