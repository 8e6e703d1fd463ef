"""Flat key-value run configuration with strict validation.

Precedence: --set overrides > config file > defaults; the OMNIC_SEED
environment variable is the lowest-precedence seed source.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .encoder import EncoderConfig
from .errors import ConfigError

_POSITIVE = ("must be positive", lambda v: v > 0)
_NON_NEGATIVE = ("must be >= 0", lambda v: v >= 0)
_PROBABILITY = ("must be in [0, 1]", lambda v: 0.0 <= v <= 1.0)
_ANY = ("", lambda v: True)


def _pair(s):
    parts = str(s).replace("x", ",").split(",")
    if len(parts) != 2:
        raise ValueError(s)
    return (int(parts[0]), int(parts[1]))


# key -> (parser, default, (message, predicate))
SCHEMA = {
    # encoder
    "embed_dim": (int, 64, _POSITIVE),
    "n_layers": (int, 3, _POSITIVE),
    "n_heads": (int, 4, _POSITIVE),
    "mlp_ratio": (float, 4.0, _POSITIVE),
    "image_size": (_pair, (32, 32), _ANY),
    "image_patch": (_pair, (8, 8), _ANY),
    "audio_size": (_pair, (32, 32), _ANY),
    "audio_patch": (_pair, (8, 8), _ANY),
    "text_len": (int, 16, _POSITIVE),
    "vocab_size": (int, 258, _POSITIVE),
    "proj_dim": (int, 32, _POSITIVE),
    "head_mode": (str, "separate", ("must be separate|shared", lambda v: v in ("separate", "shared"))),
    # contrastive pretraining
    "temperature": (float, 0.05, _POSITIVE),
    "batch_size": (int, 32, _POSITIVE),
    "epochs": (int, 30, _NON_NEGATIVE),
    "lr": (float, 1e-3, _POSITIVE),
    "min_lr": (float, 1e-5, _NON_NEGATIVE),
    "weight_decay": (float, 0.1, _NON_NEGATIVE),
    "warmup_epochs": (int, 5, _NON_NEGATIVE),
    "schedule_mode": (str, "cyclic", ("must be cyclic|uniform", lambda v: v in ("cyclic", "uniform"))),
    # augmentation
    "crop_scale_min": (float, 0.5, _PROBABILITY),
    "crop_scale_max": (float, 1.0, _PROBABILITY),
    "flip_p": (float, 0.5, _PROBABILITY),
    "jitter": (float, 0.3, _NON_NEGATIVE),
    "blur_p": (float, 0.3, _PROBABILITY),
    "masks_per_axis": (int, 2, _NON_NEGATIVE),
    "max_time_mask_frac": (float, 0.25, _PROBABILITY),
    "max_freq_mask_frac": (float, 0.25, _PROBABILITY),
    "token_mask_p": (float, 0.15, _PROBABILITY),
    # corpora
    "n_classes": (int, 4, ("must be >= 2", lambda v: v >= 2)),
    "per_class": (int, 256, _POSITIVE),
    "noise": (float, 0.2, _PROBABILITY),
    "holdout_fraction": (float, 0.2, _PROBABILITY),
    "balance_target": (int, 0, _NON_NEGATIVE),
    # evaluation
    "knn_k": (int, 20, _POSITIVE),
    "knn_temperature": (float, 0.07, _POSITIVE),
    "metric_samples": (int, 256, _POSITIVE),
    # probing / fine-tuning
    "probe_lr": (float, 1e-3, _POSITIVE),
    "probe_epochs": (int, 40, _NON_NEGATIVE),
    "probe_warmup_epochs": (int, 10, _NON_NEGATIVE),
    "probe_min_lr": (float, 1e-4, _NON_NEGATIVE),
    "sbora_rank": (int, 8, _POSITIVE),
    "sbora_alpha": (float, 8.0, _POSITIVE),
    "sbora_epochs": (int, 5, _NON_NEGATIVE),
    "sbora_modality": (str, "image", ("must be image|audio|text", lambda v: v in ("image", "audio", "text"))),
    # alignment
    "align_lr": (float, 1e-2, _POSITIVE),
    "align_min_lr": (float, 1e-3, _NON_NEGATIVE),
    "align_epochs": (int, 200, _NON_NEGATIVE),
    "align_warmup_epochs": (int, 10, _NON_NEGATIVE),
    "align_batch_size": (int, 128, _POSITIVE),
    "align_classes": (int, 8, ("must be >= 2", lambda v: v >= 2)),
    "align_pairs_per_class": (int, 64, _POSITIVE),
    "paired_modality": (str, "image", ("must be image|audio", lambda v: v in ("image", "audio"))),
    # run
    "seed": (int, 0, _NON_NEGATIVE),
}


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError as e:
            raise AttributeError(key) from e

    def encoder_config(self) -> EncoderConfig:
        v = self.values
        return EncoderConfig(
            embed_dim=v["embed_dim"],
            n_layers=v["n_layers"],
            n_heads=v["n_heads"],
            mlp_ratio=v["mlp_ratio"],
            image_size=v["image_size"],
            image_patch=v["image_patch"],
            audio_size=v["audio_size"],
            audio_patch=v["audio_patch"],
            text_len=v["text_len"],
            vocab_size=v["vocab_size"],
            proj_dim=v["proj_dim"],
            head_mode=v["head_mode"],
        ).validate()

    def resolved_lines(self) -> list[str]:
        out = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, tuple):
                v = f"{v[0]},{v[1]}"
            out.append(f"{key}={v}")
        return out


def parse_kv_file(path) -> dict[str, str]:
    doc = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            doc[key.strip()] = value.strip()
    return doc


def validate_config(doc: dict[str, str], overrides: dict[str, str] | None = None) -> RunConfig:
    """Type-check, range-check and default-fill a flat key-value document."""
    merged = dict(doc)
    merged.update(overrides or {})
    values = {}
    for key, (parser, default, (msg, pred)) in SCHEMA.items():
        if key in merged:
            raw = merged.pop(key)
            try:
                value = parser(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {parser.__name__}")
            if not pred(value):
                raise ConfigError(f"key {key!r}: value {value!r} {msg}")
            values[key] = value
        else:
            values[key] = default
    if merged:
        raise ConfigError(f"unknown config keys: {sorted(merged)}")
    if "seed" not in doc and "seed" not in (overrides or {}):
        env_seed = os.environ.get("OMNIC_SEED")
        if env_seed is not None:
            try:
                values["seed"] = int(env_seed)
            except ValueError:
                raise ConfigError(f"OMNIC_SEED is not an integer: {env_seed!r}")
    cfg = RunConfig(values)
    cfg.encoder_config()  # surface cross-field encoder errors early
    return cfg
