"""Run configuration: a flat ``key = value`` file with one section per
module, merged with command-line overrides.

Unknown sections and keys are rejected instead of ignored so typos
fail loudly.  Every value has a typed schema entry and a default; a
missing file or section simply means defaults.  Overrides arrive as
"section.key=value" strings and go through the same coercion.
"""

from . import dsp
from .audio import DEFAULT_FEATURE_KINDS, AudioBranchConfig
from .data import Featurizer, SyntheticSpec
from .errors import ConfigError
from .fusion import FusionConfig
from .text import TextBranchConfig
from .train import TrainConfig

# (type, default) per key; types: int, float, bool, str, ints, strs
SCHEMA = {
    "audio": {
        "feature_kinds": ("strs", ",".join(DEFAULT_FEATURE_KINDS)),
        "lstm_hidden": ("int", "200"),
        "kernel_sizes": ("ints", "3,5,7,9"),
        "channels_per_kernel": ("int", "200"),
        "conv_stride": ("int", "1"),
        "conv_padding": ("str", "same"),
        "attention_width": ("int", "100"),
        "asv_width": ("int", "100"),
        "combine": ("str", "concat"),
        "dropout": ("float", "0.4"),
        "conv_dropout": ("float", "0.35"),
        "use_batchnorm": ("bool", "true"),
    },
    "text": {
        "embedding_width": ("int", "16"),
        "embeddings": ("str", ""),
        "use_pos_tags": ("bool", "false"),
        "lstm_hidden": ("int", "150"),
        "kernel_sizes": ("ints", "3,5"),
        "channels_per_kernel": ("int", "100"),
        "conv_padding": ("str", "same"),
        "tsv_width": ("int", "100"),
        "tsv_source": ("str", "conv"),
        "dropout": ("float", "0.4"),
    },
    "fusion": {
        "classes": ("int", "2"),
        "context_hidden": ("int", "100"),
        "shared_width": ("int", "100"),
    },
    "train": {
        "batch_size": ("int", "32"),
        "epochs": ("int", "50"),
        "lr": ("float", "0.001"),
        "seed": ("int", "0"),
        "loss": ("str", "xent"),
        "runs": ("int", "3"),
        "val_fraction": ("float", "0.1"),
        "freeze_epochs": ("int", "0"),
    },
    "features": {
        "cnn_source": ("str", "logmel"),
        "window": ("int", "1024"),
        "hop": ("int", "512"),
        "n_mels": ("int", "64"),
    },
    "synthetic": {
        "utterances": ("int", "500"),
        "classes": ("int", "2"),
        "audio_frac": ("float", "0.5"),
        "text_frac": ("float", "0.5"),
        "noise": ("float", "0.02"),
        "seed": ("int", "0"),
        "utterances_per_video": ("int", "5"),
        "train_fraction": ("float", "0.8"),
        "sample_rate": ("int", "22050"),
        "duration": ("float", "0.6"),
        "embedding_width": ("int", "16"),
        "amplitude": ("float", "0.3"),
    },
}

_BOOL_WORDS = {"true": True, "yes": True, "1": True,
               "false": False, "no": False, "0": False}


def _coerce(kind, raw, where):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError(raw)
            return _BOOL_WORDS[raw.lower()]
        if kind == "ints":
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if kind == "strs":
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind}") from exc


def parse_config_text(text, source="<config>"):
    """Raw (section, key) -> string pairs from file text; layout errors
    name the offending line."""
    values = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigError(f"{where}: key before any [section] header")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in SCHEMA[section]:
            raise ConfigError(f"{where}: unknown key '{key}' in [{section}]")
        if (section, key) in values:
            raise ConfigError(f"{where}: duplicate key '{key}' in [{section}]")
        values[(section, key)] = (raw.strip(), where)
    return values


def parse_overrides(pairs):
    """"section.key=value" strings from the command line."""
    values = {}
    for pair in pairs or ():
        where = f"override {pair!r}"
        if "=" not in pair:
            raise ConfigError(f"{where}: expected section.key=value")
        dotted, _, raw = pair.partition("=")
        if "." not in dotted:
            raise ConfigError(f"{where}: expected section.key=value")
        section, _, key = dotted.strip().partition(".")
        if section not in SCHEMA:
            raise ConfigError(f"{where}: unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"{where}: unknown key '{key}' in [{section}]")
        values[(section, key)] = (raw.strip(), where)
    return values


class RunConfig:
    """Typed view over the merged configuration, plus builders for the
    model and pipeline objects it describes."""

    def __init__(self, values=None):
        merged = {}
        for section, keys in SCHEMA.items():
            for key, (kind, default) in keys.items():
                merged[(section, key)] = _coerce(kind, default,
                                                 f"default {section}.{key}")
        for (section, key), (raw, where) in (values or {}).items():
            kind = SCHEMA[section][key][0]
            merged[(section, key)] = _coerce(kind, raw, where)
        self._values = merged

    def get(self, section, key):
        if (section, key) not in self._values:
            raise ConfigError(f"unknown configuration key {section}.{key}")
        return self._values[(section, key)]

    def lstm_in_width(self):
        return sum(dsp.FEATURE_DIMS[k] for k in self.get("audio", "feature_kinds"))

    def audio_config(self) -> AudioBranchConfig:
        g = lambda key: self.get("audio", key)
        featurizer = self.featurizer()
        return AudioBranchConfig(
            feature_kinds=g("feature_kinds"), lstm_hidden=g("lstm_hidden"),
            kernel_sizes=g("kernel_sizes"),
            channels_per_kernel=g("channels_per_kernel"),
            conv_stride=g("conv_stride"), conv_padding=g("conv_padding"),
            cnn_in_channels=featurizer.cnn_channels,
            attention_width=g("attention_width"), asv_width=g("asv_width"),
            combine=g("combine"), dropout=g("dropout"),
            conv_dropout=g("conv_dropout"), use_batchnorm=g("use_batchnorm"),
        )

    def text_config(self) -> TextBranchConfig:
        g = lambda key: self.get("text", key)
        return TextBranchConfig(
            embedding_width=g("embedding_width"),
            use_pos_tags=g("use_pos_tags"), lstm_hidden=g("lstm_hidden"),
            kernel_sizes=g("kernel_sizes"),
            channels_per_kernel=g("channels_per_kernel"),
            conv_padding=g("conv_padding"), tsv_width=g("tsv_width"),
            tsv_source=g("tsv_source"), dropout=g("dropout"),
        )

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(
            n_classes=self.get("fusion", "classes"),
            context_hidden=self.get("fusion", "context_hidden"),
            shared_width=self.get("fusion", "shared_width"),
        )

    def train_config(self) -> TrainConfig:
        g = lambda key: self.get("train", key)
        return TrainConfig(
            batch_size=g("batch_size"), epochs=g("epochs"), lr=g("lr"),
            seed=g("seed"), loss=g("loss"), runs=g("runs"),
            val_fraction=g("val_fraction"), freeze_epochs=g("freeze_epochs"),
        )

    def synthetic_spec(self) -> SyntheticSpec:
        g = lambda key: self.get("synthetic", key)
        return SyntheticSpec(
            utterances=g("utterances"), classes=g("classes"),
            audio_frac=g("audio_frac"), text_frac=g("text_frac"),
            noise=g("noise"), seed=g("seed"),
            utterances_per_video=g("utterances_per_video"),
            train_fraction=g("train_fraction"), sample_rate=g("sample_rate"),
            duration=g("duration"), embedding_width=g("embedding_width"),
            amplitude=g("amplitude"),
        )

    def featurizer(self) -> Featurizer:
        g = lambda key: self.get("features", key)
        return Featurizer(
            self.get("audio", "feature_kinds"), cnn_source=g("cnn_source"),
            window=g("window"), hop=g("hop"), n_mels=g("n_mels"),
            use_pos_tags=self.get("text", "use_pos_tags"),
        )


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then overrides."""
    values = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        values.update(parse_config_text(text, source=path))
    values.update(parse_overrides(overrides))
    return RunConfig(values)
