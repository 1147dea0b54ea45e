"""Sectioned TOML configuration with strict keys and ``section.key=value`` overrides.

A config document has one table per section::

    [model]
    d_model = 64

    [train]
    base_lr = 5e-4

    [noise]
    p_drop = 0.1

Every key must belong to the schema below; anything else is an error, so a
typo can never silently fall back to a default. Seeds are not config keys:
they come from ``--seed`` (CLI) or the manifest.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, fields
from typing import Any, Iterable, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .synthetic import SyntheticPairSpec
from .training import NoiseConfig, TrainConfig
from .transformer import ModelConfig


@dataclass
class BpeConfig:
    num_merges: int = 500
    alpha: float = 0.5
    sample_size: int = 0  # 0: balanced default

    def validate(self):
        if self.num_merges < 0:
            raise ConfigError("bpe.num_merges must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("bpe.alpha must lie in [0, 1]")
        if self.sample_size < 0:
            raise ConfigError("bpe.sample_size must be >= 0")


@dataclass
class DecodeConfig:
    beam: int = 1
    max_len: int = 0  # 0: min(1.5 * source length + 5, max_positions - 1)
    length_penalty: float = 1.0
    batch_size: int = 32
    direction: str = "lmr2hmr"
    greedy: bool = False

    def validate(self):
        if self.beam < 1 or self.batch_size < 1 or self.max_len < 0:
            raise ConfigError("decode.beam and decode.batch_size must be >= 1, decode.max_len >= 0")
        if self.direction not in ("lmr2hmr", "hmr2lmr"):
            raise ConfigError(f"decode.direction must be lmr2hmr or hmr2lmr, got {self.direction!r}")


@dataclass
class AdapterConfig:
    dim: int = 0  # 0: no adapters (full fine-tuning)

    def validate(self):
        if self.dim < 0:
            raise ConfigError("adapters.dim must be >= 0")


def _schema_fields(cls, drop=()) -> dict[str, Any]:
    return {f.name: f for f in fields(cls) if f.name not in drop}


# section -> (dataclass, keys hidden from users)
SECTIONS = {
    "model": (ModelConfig, ("vocab_size", "n_languages", "adapter_dim", "tie_embeddings")),
    "train": (TrainConfig, ("seed", "noise")),
    "noise": (NoiseConfig, ()),
    "bpe": (BpeConfig, ()),
    "decode": (DecodeConfig, ()),
    "adapters": (AdapterConfig, ()),
    "synthetic": (SyntheticPairSpec, ("seed",)),
}


def section_keys(section: str) -> list[str]:
    cls, drop = SECTIONS[section]
    return list(_schema_fields(cls, drop))


def parse_value(text: str):
    """TOML scalar if it parses as one (``3``, ``1e-4``, ``true``, ``"x"``), else the raw string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from None


def merge_overrides(doc: Mapping, overrides: Iterable[str]) -> dict:
    """Apply ``section.key=value`` strings on top of a parsed document."""
    out = {k: dict(v) if isinstance(v, Mapping) else v for k, v in doc.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, value = item.split("=", 1)
        if "." not in key:
            raise ConfigError(f"override key {key!r} needs a section prefix (e.g. train.base_lr)")
        section, name = key.strip().split(".", 1)
        out.setdefault(section, {})
        if not isinstance(out[section], dict):
            raise ConfigError(f"{section!r} is not a section")
        out[section][name] = parse_value(value.strip())
    return out


class ResolvedConfig:
    """Validated per-section values for one command, defaults filled in."""

    def __init__(self, sections: Mapping[str, Mapping], allowed: Iterable[str]):
        allowed = list(allowed)
        for section, values in sections.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section {section!r} (known: {sorted(SECTIONS)})")
            if section not in allowed:
                raise ConfigError(f"config section {section!r} is not used by this command "
                                  f"(accepted: {allowed})")
            if not isinstance(values, Mapping):
                raise ConfigError(f"config section {section!r} must be a table")
            unknown = sorted(set(values) - set(section_keys(section)))
            if unknown:
                raise ConfigError(f"unknown config keys in [{section}]: {unknown}")
        self.values = {s: dict(sections.get(s, {})) for s in allowed}

    def build(self, section: str, **fixed):
        cls, _ = SECTIONS[section]
        kwargs = dict(self.values.get(section, {}))
        kwargs.update(fixed)
        try:
            obj = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"[{section}]: {exc}") from None
        if hasattr(obj, "validate"):
            obj.validate()
        return obj

    def resolved(self) -> dict:
        """Every key of every accepted section, with defaults, as plain JSON types."""
        out = {}
        for section in self.values:
            cls, drop = SECTIONS[section]
            fixed = {"vocab_size": 10} if cls is ModelConfig else {}
            obj = self.build(section, **fixed)
            d = obj.to_dict() if hasattr(obj, "to_dict") else {f: getattr(obj, f) for f in section_keys(section)}
            out[section] = {k: _plain(d[k]) for k in section_keys(section)}
        return out


def _plain(v):
    return v.value if hasattr(v, "value") else v


def resolve(config_path, overrides: Iterable[str], allowed: Iterable[str]) -> ResolvedConfig:
    doc = load_toml(config_path) if config_path else {}
    return ResolvedConfig(merge_overrides(doc, overrides), allowed)


def train_config(cfg: ResolvedConfig, seed: int) -> TrainConfig:
    noise = cfg.build("noise") if "noise" in cfg.values else NoiseConfig()
    return cfg.build("train", seed=seed, noise=noise)


def model_config(cfg: ResolvedConfig, vocab_size: int, **extra) -> ModelConfig:
    return cfg.build("model", vocab_size=vocab_size, **extra)
