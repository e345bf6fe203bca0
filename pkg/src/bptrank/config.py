"""Versioned pipeline configuration: INI sections, presets and overrides."""

from __future__ import annotations

import configparser
import copy
import hashlib
import json
from pathlib import Path

from .attention import AttentionConfig
from .errors import BptRankError, ConfigError
from .mining import MiningConfig
from .model import ModelConfig
from .training import TrainConfig

CONFIG_VERSION = 1


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on", "enabled"):
        return True
    if low in ("0", "false", "no", "off", "disabled"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    return [int(x) for x in str(text).replace(",", " ").split()]


def _floats(text):
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    return [float(x) for x in str(text).replace(",", " ").split()]


# section -> key -> (parser, default). Defaults are the toy preset.
SCHEMA = {
    "pipeline": {"version": (int, CONFIG_VERSION), "seed": (int, 0), "heldout_every": (int, 5)},
    "corpus": {"min_len": (int, 32), "max_len": (int, 64), "vocab_max": (int, 2000)},
    "model": {
        "d_model": (int, 64), "n_heads": (int, 4), "q_chunk": (int, 32), "kv_chunk": (int, 32),
        "rope_base": (float, 10000.0), "max_seq_len": (int, 128), "n_layers": (int, 2),
        "ffn_multiplier": (int, 4), "pooling": (str, "mean"), "mlp_head_dims": (_ints, []),
        "dtype": (str, "f32"),
    },
    "train": {
        "learning_rate": (float, 2e-3), "epochs": (int, 30), "batch_size": (int, 16),
        "grad_accum_steps": (int, 2), "scheduler": (str, "cosine"), "margin": (float, 1.0),
        "memory_bank_size": (int, 512), "memory_bank_weight": (float, 0.0),
        "recompute_activations": (_bool, False), "optimizer": (str, "adam"),
        "adam_betas": (_floats, [0.9, 0.999]), "adam_eps": (float, 1e-8),
    },
    "mining": {"k": (int, 20), "lam": (float, 0.5), "m": (int, 3), "final_selector": (str, "mmr"),
               "k1": (float, 1.2), "b": (float, 0.75), "workers": (int, 1)},
    "eval": {"ks": (_ints, [3, 5, 10]), "seeds": (_ints, [0, 1, 2]), "batch_size": (int, 64), "workers": (int, 1)},
    "bench": {"batch_size": (int, 16), "n_queries": (int, 128), "hardware": (str, "cpu")},
    "paths": {"corpus": (str, ""), "out": (str, "run")},
}

PRESETS = {
    "toy": {},
    "paper": {
        "corpus": {"min_len": 512, "max_len": 1024},
        "model": {"d_model": 1024, "n_heads": 32, "q_chunk": 32, "kv_chunk": 32, "max_seq_len": 1024,
                  "n_layers": 24, "pooling": "mean"},
        "train": {"learning_rate": 5e-5, "epochs": 10, "batch_size": 512, "grad_accum_steps": 2,
                  "scheduler": "cosine", "memory_bank_size": 512, "memory_bank_weight": 0.5,
                  "recompute_activations": True,
                  "optimizer": "sgd"},
        "eval": {"batch_size": 512},
        "bench": {"batch_size": 512},
    },
}


def _parse(section, key, value):
    try:
        parser = SCHEMA[section][key][0]
    except KeyError:
        raise ConfigError("unknown key", f"{section}.{key}") from None
    try:
        return parser(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {value!r}: {exc}", f"{section}.{key}") from None


class PipelineConfig:
    """All stage settings in one document, addressed as ``section.key``."""

    def __init__(self, values=None):
        self.values = {s: {k: copy.deepcopy(d) for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        for section, keys in (values or {}).items():
            if section not in SCHEMA:
                raise ConfigError("unknown section", section)
            for key, value in keys.items():
                self.values[section][key] = _parse(section, key, value)
        if self.values["pipeline"]["version"] != CONFIG_VERSION:
            raise ConfigError(f"unsupported version (expected {CONFIG_VERSION})", "pipeline.version")

    @classmethod
    def preset(cls, name="toy"):
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}", "preset")
        return cls(PRESETS[name])

    @classmethod
    def from_ini(cls, text, base=None):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from None
        cfg = base.copy() if base is not None else cls()
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError("unknown section", section)
            for key, value in parser.items(section):
                cfg.values[section][key] = _parse(section, key, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, base=None):
        return cls.from_ini(Path(path).read_text(encoding="utf-8"), base)

    def copy(self):
        out = PipelineConfig()
        out.values = copy.deepcopy(self.values)
        return out

    def get(self, dotted):
        section, _, key = dotted.partition(".")
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError("unknown key", dotted)
        return self.values[section][key]

    def with_overrides(self, assignments):
        """Apply ``section.key=value`` strings; returns a new config."""
        out = self.copy()
        for item in assignments:
            dotted, sep, value = item.partition("=")
            section, _, key = dotted.strip().partition(".")
            if not sep or not key:
                raise ConfigError("override must look like section.key=value", item)
            if section not in SCHEMA:
                raise ConfigError("unknown section", section)
            out.values[section][key] = _parse(section, key, value.strip())
        out.validate()
        return out

    # -- typed views ------------------------------------------------------

    def model_config(self, vocab_size) -> ModelConfig:
        m = self.values["model"]
        try:
            attn = AttentionConfig(d_model=m["d_model"], n_heads=m["n_heads"], q_chunk=m["q_chunk"],
                                   kv_chunk=m["kv_chunk"], rope_base=m["rope_base"], max_seq_len=m["max_seq_len"])
            return ModelConfig(attention=attn, n_layers=m["n_layers"], ffn_multiplier=m["ffn_multiplier"],
                               vocab_size=vocab_size, pooling=m["pooling"], mlp_head_dims=tuple(m["mlp_head_dims"]),
                               dtype=m["dtype"])
        except BptRankError as exc:
            raise ConfigError(str(exc), "model") from None

    def train_config(self, seed=None) -> TrainConfig:
        t = dict(self.values["train"])
        t["adam_betas"] = tuple(t["adam_betas"])
        t["seed"] = self.values["pipeline"]["seed"] if seed is None else seed
        try:
            return TrainConfig(**t)
        except BptRankError as exc:
            raise ConfigError(str(exc), "train") from None

    def mining_config(self) -> MiningConfig:
        m = {k: v for k, v in self.values["mining"].items() if k != "workers"}
        try:
            return MiningConfig(**m)
        except BptRankError as exc:
            raise ConfigError(str(exc), "mining") from None

    def validate(self):
        if self.values["pipeline"]["version"] != CONFIG_VERSION:
            raise ConfigError(f"unsupported version (expected {CONFIG_VERSION})", "pipeline.version")
        c = self.values["corpus"]
        if not 0 < c["min_len"] < c["max_len"]:
            raise ConfigError("need 0 < min_len < max_len", "corpus.min_len")
        if c["vocab_max"] < 1:
            raise ConfigError("must be positive", "corpus.vocab_max")
        if self.values["pipeline"]["heldout_every"] < 2:
            raise ConfigError("must be >= 2", "pipeline.heldout_every")
        e = self.values["eval"]
        if not e["ks"] or min(e["ks"]) < 1:
            raise ConfigError("cutoffs must be >= 1", "eval.ks")
        if not e["seeds"]:
            raise ConfigError("need at least one seed", "eval.seeds")
        if self.values["bench"]["n_queries"] < 100:
            raise ConfigError("must be >= 100", "bench.n_queries")
        self.model_config(vocab_size=8)
        self.train_config()
        self.mining_config()
        return self

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        return copy.deepcopy(self.values)

    def to_ini(self) -> str:
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            for key in SCHEMA[section]:
                value = self.values[section][key]
                if isinstance(value, list):
                    value = " ".join(str(v) for v in value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        blob = json.dumps(self.values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def __eq__(self, other):
        return isinstance(other, PipelineConfig) and self.values == other.values
