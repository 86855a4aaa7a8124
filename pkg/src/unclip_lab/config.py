"""Run configuration: a small INI file with typed, closed-world keys."""

from __future__ import annotations

import configparser
import hashlib
import io
import os

from .clip import ClipTrainConfig
from .corpus import CorpusConfig
from .diffusion import UnclipTrainConfig
from .finetune import FinetuneConfig


class ConfigError(Exception):
    pass


# section -> key -> default; value types are inferred from the defaults
DEFAULTS = {
    "corpus": {
        "size": 2000,
        "orientation_fraction": -1.0,  # negative means "leave unconstrained"
    },
    "clip": {
        "steps": 1500,
        "batch_size": 32,
        "learning_rate": 3e-4,
        "weight_decay": 1e-4,
        "caption_family_prob": 0.4,
        "eval_every": 100,
        "train_temperature": True,
    },
    "diffusion": {
        "timesteps": 100,
        "beta_min": 1e-4,
        "beta_max": 0.06,
        "steps": 1200,
        "batch_size": 32,
        "learning_rate": 2e-3,
        "weight_decay": 0.0,
    },
    "finetune": {
        "mode": "default",
        "epochs": 4,
        "batch_size": 32,
        "learning_rate": 1e-5,
        "weight_decay": 0.0,
        "bank_seed": 1234,
    },
    "eval": {
        "blind_threshold": 0.8,
        "per_family_cap": 40,
        "background_threshold": 0.5,
        "retrieval_k": 1,
    },
}


class RunConfig:
    def __init__(self, values=None):
        self.values = {s: dict(kv) for s, kv in DEFAULTS.items()}
        for (s, k), v in (values or {}).items():
            self.values[s][k] = v

    def __getitem__(self, section):
        return self.values[section]

    def render(self):
        lines = []
        for s in DEFAULTS:
            lines.append(f"[{s}]")
            for k in DEFAULTS[s]:
                lines.append(f"{k} = {self.values[s][k]}")
            lines.append("")
        return "\n".join(lines)

    def digest(self):
        return hashlib.sha256(self.render().encode()).hexdigest()[:16]

    def corpus_config(self):
        of = self["corpus"]["orientation_fraction"]
        return CorpusConfig(size=self["corpus"]["size"],
                            orientation_fraction=None if of < 0 else of)

    def clip_config(self):
        c = self["clip"]
        return ClipTrainConfig(steps=c["steps"], batch_size=c["batch_size"],
                               learning_rate=c["learning_rate"],
                               weight_decay=c["weight_decay"],
                               caption_family_prob=c["caption_family_prob"],
                               eval_every=c["eval_every"],
                               train_temperature=c["train_temperature"])

    def unclip_config(self):
        d = self["diffusion"]
        return UnclipTrainConfig(steps=d["steps"], batch_size=d["batch_size"],
                                 learning_rate=d["learning_rate"],
                                 weight_decay=d["weight_decay"])

    def finetune_config(self):
        f = self["finetune"]
        return FinetuneConfig(learning_rate=f["learning_rate"],
                              batch_size=f["batch_size"],
                              weight_decay=f["weight_decay"],
                              bank_seed=f["bank_seed"])


def _coerce(section, key, raw):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r} "
                          f"(expected {type(default).__name__})") from None


def load_config(path):
    parser = configparser.ConfigParser()
    with open(path) as f:
        try:
            parser.read_file(f)
        except configparser.Error as e:
            raise ConfigError(f"malformed config: {e}") from None
    values = {}
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            values[(section, key)] = _coerce(section, key, raw)
    return RunConfig(values)


def write_default_config(path):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(RunConfig().render())
    os.replace(tmp, path)
