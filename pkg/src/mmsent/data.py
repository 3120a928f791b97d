"""Corpus plumbing: the line-delimited manifest format, video-level
splits, a synthetic corpus whose two modalities carry complementary
label information, and the featurizer that turns records into model
inputs.

Manifest files are JSON lines: a header object declaring the class
count and field schema, then one record object per line.  Waveform
paths are stored relative to the manifest and resolved on load.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import dsp
from .containers import save_embedding_table
from .errors import ConfigError, ContractError, DataError
from .fusion import FusedInput
from .tensor import Tensor
from .text import rule_pos_tags, tokenize

MANIFEST_FIELDS = ("id", "video", "speaker", "wav", "text", "pos",
                   "label", "score", "split")
REQUIRED_FIELDS = ("id", "video", "speaker", "wav", "text", "label", "split")
SPLITS = ("train", "test")

# class-indicative cue tokens, lowest class first; fillers never overlap
CUE_WORDS = ("awful", "bad", "weak", "plain", "fine", "good", "great")
FILLER_WORDS = ("the", "a", "to", "of", "and", "movie", "film", "scene",
                "actor", "story", "it", "was", "this", "very", "quite")
TONE_BIN_BASE = 20
TONE_BIN_STEP = 10
RANDOM_BIN_RANGE = (120, 160)


class UtteranceRecord:
    def __init__(self, id, video, speaker, wav, text, label, split,
                 pos=None, score=None):
        self.id = id
        self.video = video
        self.speaker = speaker
        self.wav = wav
        self.text = text
        self.pos = pos
        self.label = label
        self.score = score
        self.split = split

    @property
    def tokens(self):
        return tokenize(self.text)

    @property
    def pos_tags(self):
        return self.pos.split() if self.pos else None

    def to_json(self, wav_path=None):
        out = {"id": self.id, "video": self.video, "speaker": self.speaker,
               "wav": wav_path if wav_path is not None else self.wav,
               "text": self.text, "label": self.label, "split": self.split}
        if self.pos is not None:
            out["pos"] = self.pos
        if self.score is not None:
            out["score"] = self.score
        return json.dumps(out, sort_keys=True)


class CorpusManifest:
    """Ordered records grouped by video, plus the class count."""

    def __init__(self, records, n_classes: int):
        if not records:
            raise DataError("no utterances")
        self.records = list(records)
        self.n_classes = n_classes
        self.videos = {}
        for rec in self.records:
            self.videos.setdefault(rec.video, []).append(rec)

    def __len__(self):
        return len(self.records)

    def split(self, name: str):
        if name not in SPLITS:
            raise ConfigError(f"split must be train or test, got {name!r}")
        return [r for r in self.records if r.split == name]

    def split_videos(self, name: str):
        out = {}
        for rec in self.split(name):
            out.setdefault(rec.video, []).append(rec)
        return out


def _validate(records, n_classes, manifest_dir, check_files=True):
    problems = []
    seen = set()
    video_splits = {}
    for rec in records:
        if rec.id in seen:
            problems.append(f"duplicate utterance id '{rec.id}'")
        seen.add(rec.id)
        if rec.split not in SPLITS:
            problems.append(f"'{rec.id}': bad split {rec.split!r}")
        if not isinstance(rec.label, int) or not 0 <= rec.label < n_classes:
            problems.append(f"'{rec.id}': label {rec.label!r} outside 0..{n_classes - 1}")
        if rec.score is not None:
            if not -3.0 <= rec.score <= 3.0:
                problems.append(f"'{rec.id}': score {rec.score} outside [-3, 3]")
            elif n_classes == 2:
                # positive scores are class 1, the boundary 0 is negative
                implied = 1 if rec.score > 0 else 0
                if implied != rec.label:
                    problems.append(
                        f"'{rec.id}': score {rec.score} implies label {implied}, "
                        f"manifest says {rec.label}"
                    )
        video_splits.setdefault(rec.video, set()).add(rec.split)
        if check_files and not os.path.isfile(rec.wav):
            problems.append(f"'{rec.id}': missing waveform {rec.wav}")
    for video, splits in sorted(video_splits.items()):
        if len(splits) > 1:
            problems.append(f"video '{video}' appears in splits {sorted(splits)}")
    if problems:
        raise DataError("; ".join(problems))


def load_manifest(path) -> CorpusManifest:
    manifest_dir = os.path.dirname(os.path.abspath(path))
    records = []
    n_classes = None
    fields = None
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: not valid JSON ({exc})") from None
            if n_classes is None:
                if "classes" not in obj or "fields" not in obj:
                    raise DataError(
                        f"{path}:{lineno}: first line must declare classes and fields"
                    )
                n_classes = int(obj["classes"])
                fields = tuple(obj["fields"])
                unknown = set(fields) - set(MANIFEST_FIELDS)
                if unknown:
                    raise DataError(f"{path}: unknown fields {sorted(unknown)}")
                missing = set(REQUIRED_FIELDS) - set(fields)
                if missing:
                    raise DataError(f"{path}: header omits required fields {sorted(missing)}")
                if n_classes < 2:
                    raise DataError(f"{path}: class count {n_classes} below 2")
                continue
            bad = set(obj) - set(fields)
            if bad:
                raise DataError(f"{path}:{lineno}: fields {sorted(bad)} not in header schema")
            absent = set(REQUIRED_FIELDS) - set(obj)
            if absent:
                raise DataError(f"{path}:{lineno}: missing fields {sorted(absent)}")
            records.append(UtteranceRecord(
                id=str(obj["id"]), video=str(obj["video"]),
                speaker=str(obj["speaker"]),
                wav=os.path.join(manifest_dir, obj["wav"]),
                text=str(obj["text"]), label=obj["label"],
                split=str(obj["split"]), pos=obj.get("pos"),
                score=obj.get("score"),
            ))
    if n_classes is None or not records:
        raise DataError("no utterances")
    _validate(records, n_classes, manifest_dir)
    return CorpusManifest(records, n_classes)


def save_manifest(manifest: CorpusManifest, path):
    """Write the header and one record per line; waveform paths are
    stored relative to the manifest's directory."""
    manifest_dir = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as fh:
        header = {"classes": manifest.n_classes, "fields": list(MANIFEST_FIELDS)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in manifest.records:
            rel = os.path.relpath(rec.wav, manifest_dir)
            fh.write(rec.to_json(wav_path=rel) + "\n")


def split_corpus(manifest: CorpusManifest, ratio: float, seed: int):
    """Assign whole videos to train or test at the requested ratio.

    The train side gets round(ratio * videos), kept within [1, n-1] so
    neither side is empty.  Returns (train, test) manifests.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be inside (0, 1), got {ratio}")
    videos = list(manifest.videos)
    if len(videos) < 2:
        raise DataError(f"need at least 2 videos to split, got {len(videos)}")
    rng = np.random.default_rng(seed)
    order = [videos[i] for i in rng.permutation(len(videos))]
    n_train = min(len(videos) - 1, max(1, round(ratio * len(videos))))
    train_videos = set(order[:n_train])
    train, test = [], []
    for rec in manifest.records:
        target = "train" if rec.video in train_videos else "test"
        clone = UtteranceRecord(rec.id, rec.video, rec.speaker, rec.wav,
                                rec.text, rec.label, target,
                                pos=rec.pos, score=rec.score)
        (train if target == "train" else test).append(clone)
    return (CorpusManifest(train, manifest.n_classes),
            CorpusManifest(test, manifest.n_classes))


class SyntheticSpec:
    def __init__(self, utterances=500, classes=2, audio_frac=0.5, text_frac=0.5,
                 noise=0.02, seed=0, utterances_per_video=5, train_fraction=0.8,
                 sample_rate=22050, duration=0.6, embedding_width=16,
                 amplitude=0.3):
        if not 0.0 <= audio_frac <= 1.0 or not 0.0 <= text_frac <= 1.0:
            raise ConfigError("informative fractions must be in [0, 1]")
        if not 2 <= classes <= len(CUE_WORDS):
            raise ConfigError(
                f"class count must be 2..{len(CUE_WORDS)}, got {classes}"
            )
        if utterances < classes:
            raise ConfigError("need at least one utterance per class")
        if utterances % utterances_per_video:
            raise ConfigError(
                f"{utterances} utterances do not fill videos of "
                f"{utterances_per_video}"
            )
        if noise < 0.0:
            raise ConfigError(f"noise level must be nonnegative, got {noise}")
        if not 0.0 < train_fraction < 1.0:
            raise ConfigError("train fraction must be inside (0, 1)")
        self.utterances = utterances
        self.classes = classes
        self.audio_frac = audio_frac
        self.text_frac = text_frac
        self.noise = noise
        self.seed = seed
        self.utterances_per_video = utterances_per_video
        self.train_fraction = train_fraction
        self.sample_rate = sample_rate
        self.duration = duration
        self.embedding_width = embedding_width
        self.amplitude = amplitude


def tone_bin_for_class(label: int) -> int:
    return TONE_BIN_BASE + TONE_BIN_STEP * label


def synthetic_vocabulary(spec: SyntheticSpec):
    return sorted(set(FILLER_WORDS) | set(CUE_WORDS[:spec.classes]) | {"<unk>"})


def generate_synthetic_corpus(spec: SyntheticSpec, out_dir) -> CorpusManifest:
    """Build waveforms, transcripts, the manifest, an embedding table,
    and a ground-truth sidecar under ``out_dir``.

    Labels cycle through the classes.  Within each class the utterances
    are shuffled once, the first round(audio_frac*n) become
    audio-informative and the following round(text_frac*n) become
    text-informative, so the two sets are disjoint whenever the
    fractions sum to at most 1.  Audio-informative items carry a tone
    at their class's bin center; others get a random non-class bin.
    Text-informative items contain their class's cue token; others are
    filler-only.
    """
    rng = np.random.default_rng(spec.seed)
    os.makedirs(out_dir, exist_ok=True)
    wav_dir = os.path.join(out_dir, "wav")
    os.makedirs(wav_dir, exist_ok=True)

    n = spec.utterances
    labels = [i % spec.classes for i in range(n)]

    audio_informative = np.zeros(n, dtype=bool)
    text_informative = np.zeros(n, dtype=bool)
    for c in range(spec.classes):
        members = [i for i in range(n) if labels[i] == c]
        order = [members[j] for j in rng.permutation(len(members))]
        na = round(spec.audio_frac * len(members))
        nt = round(spec.text_frac * len(members))
        for i in order[:na]:
            audio_informative[i] = True
        if spec.audio_frac + spec.text_frac <= 1.0:
            chosen = order[na:na + nt]
        else:
            chosen = order[len(order) - nt:]
        for i in chosen:
            text_informative[i] = True

    n_videos = n // spec.utterances_per_video
    video_order = rng.permutation(n_videos)
    n_train = min(n_videos - 1, max(1, round(spec.train_fraction * n_videos)))
    train_videos = set(int(v) for v in video_order[:n_train])

    samples = int(round(spec.duration * spec.sample_rate))
    t = np.arange(samples) / spec.sample_rate
    bin_hz = spec.sample_rate / dsp.DEFAULT_WINDOW

    records = []
    truths = []
    for i in range(n):
        vid = i // spec.utterances_per_video
        label = labels[i]
        utt_id = f"u{i:04d}"
        video_id = f"v{vid:03d}"
        if audio_informative[i]:
            tone_bin = tone_bin_for_class(label)
        else:
            tone_bin = int(rng.integers(*RANDOM_BIN_RANGE))
        freq = tone_bin * bin_hz
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = spec.amplitude * np.sin(2.0 * np.pi * freq * t + phase)
        if spec.noise > 0.0:
            wave = wave + spec.noise * rng.normal(size=samples)
        wav_path = os.path.join(wav_dir, f"{utt_id}.wav")
        dsp.write_wav(wav_path, wave, spec.sample_rate)

        n_fill = int(rng.integers(3, 8))
        words = [FILLER_WORDS[j] for j in rng.integers(0, len(FILLER_WORDS), n_fill)]
        if text_informative[i]:
            pos = int(rng.integers(0, len(words) + 1))
            words.insert(pos, CUE_WORDS[label])
        text = " ".join(words)

        score = None
        if spec.classes == 2:
            score = 2.0 if label == 1 else -2.0
        records.append(UtteranceRecord(
            id=utt_id, video=video_id, speaker=f"s{vid:03d}", wav=wav_path,
            text=text, label=label,
            split="train" if vid in train_videos else "test", score=score,
        ))
        truths.append({
            "id": utt_id,
            "audio_informative": bool(audio_informative[i]),
            "text_informative": bool(text_informative[i]),
            "tone_bin": tone_bin,
            "label": label,
        })

    manifest = CorpusManifest(records, spec.classes)
    save_manifest(manifest, os.path.join(out_dir, "manifest.jsonl"))
    with open(os.path.join(out_dir, "truth.jsonl"), "w", encoding="utf-8") as fh:
        for row in truths:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    table = {}
    for token in synthetic_vocabulary(spec):
        table[token] = rng.normal(size=spec.embedding_width)
    save_embedding_table(os.path.join(out_dir, "embeddings.bin"), table,
                         spec.embedding_width)
    return manifest


def load_truth(out_dir):
    rows = {}
    with open(os.path.join(out_dir, "truth.jsonl"), "r", encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            rows[row["id"]] = row
    return rows


class Featurizer:
    """Turns records into model inputs: acoustic feature families for
    the recurrent path, a spectrogram-like matrix for the CNN path, and
    tokens for the text branch.  Standardizers are fitted on training
    records only."""

    def __init__(self, feature_kinds, cnn_source="logmel", window=1024,
                 hop=512, n_mels=64, use_pos_tags=False):
        if cnn_source not in ("logmel", "raw_frames"):
            raise ConfigError(
                f"cnn source must be logmel or raw_frames, got {cnn_source!r}"
            )
        self.feature_kinds = tuple(feature_kinds)
        self.cnn_source = cnn_source
        self.window = window
        self.hop = hop
        self.n_mels = n_mels
        self.use_pos_tags = use_pos_tags
        self.standardizers = None
        self._cache = {}

    @property
    def cnn_channels(self):
        return self.n_mels if self.cnn_source == "logmel" else self.window

    def _raw_sequences(self, record: UtteranceRecord):
        if not record.wav:
            raise DataError(f"utterance '{record.id}' is missing the audio modality")
        if record.id not in self._cache:
            w = dsp.load_wav(record.wav)
            lstm = [dsp.extract_feature(kind, w, self.window, self.hop, self.n_mels)
                    for kind in self.feature_kinds]
            if self.cnn_source == "logmel":
                cnn = dsp.logmel_spectrogram(dsp.stft(w, self.window, self.hop),
                                             self.n_mels)
            else:
                from .audio import raw_frame_sequence
                cnn = raw_frame_sequence(dsp.scale_waveform(w), self.window)
            self._cache[record.id] = (lstm, cnn)
        return self._cache[record.id]

    def fit(self, records):
        """Fit per-kind standardizers (including the CNN input) on the
        given records."""
        pools = {kind: [] for kind in self.feature_kinds}
        cnn_pool = []
        for rec in records:
            lstm, cnn = self._raw_sequences(rec)
            for kind, seq in zip(self.feature_kinds, lstm):
                pools[kind].append(seq)
            cnn_pool.append(cnn)
        self.standardizers = {
            kind: dsp.fit_standardizer(seqs) for kind, seqs in pools.items()
        }
        self.standardizers["__cnn__"] = dsp.fit_standardizer(cnn_pool)
        return self

    def state_arrays(self) -> dict:
        """Fitted standardizer moments, keyed for checkpoint storage so
        evaluation can reuse the training-time scaling."""
        if self.standardizers is None:
            raise ContractError("featurizer must be fitted before use")
        out = {}
        for kind, (mean, std) in self.standardizers.items():
            out[f"feat/{kind}/mean"] = mean
            out[f"feat/{kind}/std"] = std
        return out

    def load_state_arrays(self, arrays: dict):
        """Adopt previously fitted moments; the key set must match this
        featurizer's feature kinds exactly."""
        want = set(self.feature_kinds) | {"__cnn__"}
        loaded = {}
        for kind in want:
            for part in ("mean", "std"):
                key = f"feat/{kind}/{part}"
                if key not in arrays:
                    raise ContractError(f"featurizer state is missing '{key}'")
            loaded[kind] = (np.asarray(arrays[f"feat/{kind}/mean"], dtype=np.float64),
                            np.asarray(arrays[f"feat/{kind}/std"], dtype=np.float64))
        extra = [k for k in arrays
                 if k.startswith("feat/") and k.split("/")[1] not in want]
        if extra:
            raise ContractError(f"unexpected featurizer state: {sorted(extra)}")
        self.standardizers = loaded
        return self

    def featurize(self, record: UtteranceRecord) -> FusedInput:
        if self.standardizers is None:
            raise ContractError("featurizer must be fitted before use")
        if not record.text or not record.text.strip():
            raise DataError(f"utterance '{record.id}' is missing the text modality")
        lstm, cnn = self._raw_sequences(record)
        parts = []
        for kind, seq in zip(self.feature_kinds, lstm):
            mean, std = self.standardizers[kind]
            parts.append(dsp.apply_standardizer(seq, mean, std).data)
        mean, std = self.standardizers["__cnn__"]
        cnn_data = dsp.apply_standardizer(cnn, mean, std).data
        tokens = record.tokens
        if not tokens:
            raise DataError(f"utterance '{record.id}' is missing the text modality")
        pos_tags = record.pos_tags
        if self.use_pos_tags and pos_tags is None:
            pos_tags = rule_pos_tags(tokens)
        return FusedInput(
            record.id,
            Tensor(np.concatenate(parts, axis=1)),
            Tensor(cnn_data),
            tokens,
            pos_tags=pos_tags,
            gold=record.label,
        )

    def featurize_videos(self, manifest_videos: dict):
        return {video: [self.featurize(r) for r in recs]
                for video, recs in manifest_videos.items()}
