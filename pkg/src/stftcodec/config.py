"""Layered configuration: defaults, a TOML file, then dotted-key overrides.

Five flat sections mirror the component configs (stft, generator, codebooks,
train, losses). Unknown sections, keys, or override spellings are errors, and
the effective merged config can be dumped back to TOML; reloading a dump
hashes identically.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .generator import GeneratorConfig
from .losses import LossWeights
from .quantizer import CodebookSpec
from .spectral import StftConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Raised for unknown keys, malformed values, or inconsistent sections."""


SECTION_TYPES = {
    "stft": StftConfig,
    "generator": GeneratorConfig,
    "codebooks": CodebookSpec,
    "train": TrainConfig,
    "losses": LossWeights,
}


@dataclass(frozen=True)
class CliConfig:
    """Merged view of every component config with cross-field consistency."""

    stft: StftConfig
    generator: GeneratorConfig
    codebooks: CodebookSpec
    train: TrainConfig
    losses: LossWeights

    def __post_init__(self):
        if self.generator.freq_bins != self.stft.num_bins:
            raise ConfigError(
                f"generator.freq_bins {self.generator.freq_bins} does not match "
                f"the {self.stft.num_bins} bins of stft.fft_size {self.stft.fft_size}"
            )
        if self.codebooks.input_dim != self.generator.latent_channels:
            raise ConfigError(
                f"codebooks.input_dim {self.codebooks.input_dim} does not match "
                f"generator.latent_channels {self.generator.latent_channels}"
            )
        try:
            self.train.validate_against(self.stft)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def default_config() -> CliConfig:
    return CliConfig(
        stft=StftConfig(),
        generator=GeneratorConfig(),
        codebooks=CodebookSpec(),
        train=TrainConfig(),
        losses=LossWeights(),
    )


def _section_defaults() -> dict:
    return {name: dataclasses.asdict(typ()) for name, typ in SECTION_TYPES.items()}


def _parse_override_value(text: str, reference, key: str):
    if isinstance(reference, bool):
        lowered = text.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(reference, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if isinstance(reference, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    if isinstance(reference, tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        if reference and isinstance(reference[0], bool):
            return tuple(_parse_override_value(s, True, key) for s in items)
        if reference and isinstance(reference[0], int):
            return tuple(_parse_override_value(s, 0, key) for s in items)
        if reference and isinstance(reference[0], float):
            return tuple(_parse_override_value(s, 0.0, key) for s in items)
        return tuple(items)
    return text


def load_config(path=None, overrides=()) -> CliConfig:
    """Build the effective config from defaults, an optional TOML file, and
    dotted-key overrides like ``train.batch_size=4``."""
    merged = _section_defaults()

    if path is None:
        env = os.environ.get("STFTCODEC_CONFIG")
        path = env if env else None
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section, values in data.items():
            if section not in merged:
                raise ConfigError(
                    f"{path}: unknown section [{section}]; expected one of "
                    f"{sorted(merged)}"
                )
            if not isinstance(values, dict):
                raise ConfigError(f"{path}: [{section}] must be a table")
            for key, value in values.items():
                if key not in merged[section]:
                    raise ConfigError(f"{path}: unknown key {section}.{key}")
                if isinstance(merged[section][key], tuple) and isinstance(value, list):
                    value = tuple(value)
                merged[section][key] = value

    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        section, dot, field_name = key.strip().partition(".")
        if not dot or section not in merged or field_name not in merged[section]:
            raise ConfigError(f"unknown override key {key.strip()!r}")
        merged[section][field_name] = _parse_override_value(
            raw.strip(), merged[section][field_name], key.strip()
        )

    sections = {}
    for name, typ in SECTION_TYPES.items():
        try:
            sections[name] = typ(**merged[name])
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}] {exc}") from exc
    return CliConfig(**sections)


def effective_dict(cfg: CliConfig) -> dict:
    return {name: dataclasses.asdict(getattr(cfg, name)) for name in SECTION_TYPES}


def config_hash(cfg: CliConfig) -> str:
    canonical = json.dumps(effective_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize {value!r}")


def dump_config(cfg: CliConfig, path):
    lines = []
    for name, values in effective_dict(cfg).items():
        lines.append(f"[{name}]")
        for key, value in values.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    Path(path).write_text("\n".join(lines))
