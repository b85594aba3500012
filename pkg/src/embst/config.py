"""Run configuration: one JSON document covering corpus synthesis, BPE,
model dimensions, and training hyperparameters.

The document is strict (unknown keys are errors), normalized with
defaults, and hashed canonically; the hash is stamped into every
artifact so downstream commands can refuse mismatched inputs.
"""

from __future__ import annotations

import hashlib
import json

from .data import SynthSpec
from .model import ModelConfig, ModelError


class ConfigError(ValueError):
    pass


_SYNTH_DEFAULTS = {
    "vocab_size": 50,
    "embed_dim": 16,
    "frames_min": 1,
    "frames_max": 3,
    "noise_std": 0.1,
    "len_min": 1,
    "len_max": 8,
    "n_train": 2000,
    "n_dev": 200,
    "n_test": 200,
    "zipf_exponent": 1.0,
    "seed": 0,
    "reorder": "reverse",
}

_BPE_DEFAULTS = {
    "merges": 200,
}

_MODEL_DEFAULTS = {
    "enc_hidden": 32,
    "enc_layers": 3,
    "dec_hidden": 48,
    "tau": 0.1,
    "alpha": 1.0,
    "beta": 1.0,
    "scheduled_sampling_p": 0.8,
    "attend_raw_states": False,
    "init_scale": 0.08,
    "forget_bias": 1.0,
}

_TRAIN_DEFAULTS = {
    "steps": 20000,
    "ckpt_every": 2000,
    "batch_size": 16,
    "beam": 4,
    "decode_max_len": 48,
    "clip_norm": 5.0,
    "rho": 0.95,
    "eps": 1e-6,
    "weight_decay": 1e-6,
    "seed": 0,
}

_SECTIONS = {
    "synth": _SYNTH_DEFAULTS,
    "bpe": _BPE_DEFAULTS,
    "model": _MODEL_DEFAULTS,
    "train": _TRAIN_DEFAULTS,
}


def _merge_section(name, defaults, given):
    if not isinstance(given, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {', '.join(unknown)}")
    out = dict(defaults)
    out.update(given)
    return out


def normalize_config(document):
    """Fill defaults and reject unknown keys; returns a plain nested dict."""
    if not isinstance(document, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(document) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    cfg = {name: _merge_section(name, defaults, document.get(name, {}))
           for name, defaults in _SECTIONS.items()}
    try:
        make_synth_spec(cfg).validate()
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return normalize_config(document)


def config_hash(cfg):
    """sha256 over the canonical (sorted, compact) JSON encoding."""
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def make_synth_spec(cfg):
    return SynthSpec(**cfg["synth"])


def make_model_config(cfg, objective, src_vocab_size, tgt_vocab_size):
    m = cfg["model"]
    mc = ModelConfig(objective=objective,
                     src_vocab_size=src_vocab_size,
                     tgt_vocab_size=tgt_vocab_size,
                     embed_dim=cfg["synth"]["embed_dim"],
                     **m)
    try:
        mc.validate()
    except (ValueError, ModelError) as e:
        raise ConfigError(str(e)) from e
    return mc


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
