"""Plain-text key=value experiment configs and seed derivation.

Files are INI-style sections of key=value lines. The resolved config is
re-serialized verbatim into every run directory so an experiment is fully
described by the files it leaves behind.
"""

from __future__ import annotations

import configparser
import zlib
from dataclasses import dataclass, fields, replace
from typing import IO, Mapping

import numpy as np

from .errors import ParseError, ValidationError

Sections = dict[str, dict[str, str]]


def derive_seed(seed: int, label: str, index: int = 0) -> int:
    """Stable per-module sub-seed from (global seed, label hash, index)."""
    mask = (1 << 64) - 1
    entropy = [seed & mask, zlib.crc32(label.encode("utf-8")), index & mask]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def read_sections(stream: IO[str]) -> Sections:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_file(stream)
    except configparser.Error as exc:
        raise ParseError(f"bad config: {exc}") from None
    return {name: dict(parser[name]) for name in parser.sections()}


def load_sections(path) -> Sections:
    with open(path) as fh:
        return read_sections(fh)


def write_sections(sections: Mapping[str, Mapping[str, str]], stream: IO[str]) -> None:
    for i, name in enumerate(sections):
        if i:
            stream.write("\n")
        stream.write(f"[{name}]\n")
        for key, value in sections[name].items():
            stream.write(f"{key}={value}\n")


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ParseError(f"expected boolean, got {value!r}")


@dataclass(frozen=True)
class RunConfig:
    """Union of all module settings for one experiment."""

    traces_path: str = ""
    packets_per_device: int | None = None  # fit region; the rest is OOD reserve
    seg_len: int = 100
    overlap: float = 0.5
    method: str = "STFT"
    resolution: int = 16
    f_stride: float = 0.5
    image_size: int = 224
    colormap: str = "grayscale3"
    bounds_mode: str = "per-device"  # or "global"
    augment: bool = True
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_dim: int | None = None
    patch_size: int = 16
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 15
    peak_lr: float = 1e-4
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    label_smoothing: float = 0.1
    train_frac: float = 5.0 / 7.0
    val_frac: float = 1.0 / 7.0
    test_frac: float = 1.0 / 7.0
    resamples: int = 1000
    ci_level: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("STFT", "CWT"):
            raise ValidationError(f"method {self.method!r} not STFT or CWT")
        if self.bounds_mode not in ("per-device", "global"):
            raise ValidationError(f"bounds_mode {self.bounds_mode!r} unknown")


# (section, key) -> (RunConfig field, parser)
_SCHEMA = {
    ("data", "traces"): ("traces_path", str),
    ("data", "packets"): ("packets_per_device", int),
    ("segmentation", "seg_len"): ("seg_len", int),
    ("segmentation", "overlap"): ("overlap", float),
    ("spectral", "method"): ("method", str),
    ("spectral", "resolution"): ("resolution", int),
    ("spectral", "f_stride"): ("f_stride", float),
    ("imaging", "image_size"): ("image_size", int),
    ("imaging", "colormap"): ("colormap", str),
    ("imaging", "bounds"): ("bounds_mode", str),
    ("imaging", "augment"): ("augment", _parse_bool),
    ("vit", "embed_dim"): ("embed_dim", int),
    ("vit", "num_layers"): ("num_layers", int),
    ("vit", "num_heads"): ("num_heads", int),
    ("vit", "mlp_dim"): ("mlp_dim", int),
    ("vit", "patch_size"): ("patch_size", int),
    ("train", "batch_size"): ("batch_size", int),
    ("train", "max_epochs"): ("max_epochs", int),
    ("train", "patience"): ("patience", int),
    ("train", "peak_lr"): ("peak_lr", float),
    ("train", "weight_decay"): ("weight_decay", float),
    ("train", "clip_norm"): ("clip_norm", float),
    ("train", "label_smoothing"): ("label_smoothing", float),
    ("split", "train_frac"): ("train_frac", float),
    ("split", "val_frac"): ("val_frac", float),
    ("split", "test_frac"): ("test_frac", float),
    ("eval", "resamples"): ("resamples", int),
    ("eval", "level"): ("ci_level", float),
    ("run", "seed"): ("seed", int),
}

# sections owned by the synth generator, ignored by RunConfig
_NON_RUN_SECTIONS = ("synth",)


def run_config_from_sections(sections: Sections) -> RunConfig:
    values = {}
    for section, mapping in sections.items():
        if section in _NON_RUN_SECTIONS or section.startswith("device"):
            continue
        for key, raw in mapping.items():
            try:
                field_name, parse = _SCHEMA[(section, key)]
            except KeyError:
                raise ParseError(f"unknown config key [{section}] {key}") from None
            try:
                values[field_name] = parse(raw)
            except (ValueError, TypeError) as exc:
                raise ParseError(f"bad value for [{section}] {key}: {exc}") from None
    return RunConfig(**values)


def run_config_to_sections(cfg: RunConfig) -> Sections:
    sections: Sections = {}
    by_field = {field_name: (section, key, parse)
                for (section, key), (field_name, parse) in _SCHEMA.items()}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if value is None:
            continue
        section, key, parse = by_field[f.name]
        if parse is _parse_bool:
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        sections.setdefault(section, {})[key] = text
    return sections


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, str]) -> RunConfig:
    """Apply 'section.key=value' CLI overrides on top of a config."""
    updates = {}
    for dotted, raw in overrides.items():
        section, _, key = dotted.partition(".")
        try:
            field_name, parse = _SCHEMA[(section, key)]
        except KeyError:
            raise ParseError(f"unknown override {dotted!r}") from None
        try:
            updates[field_name] = parse(raw)
        except (ValueError, TypeError) as exc:
            raise ParseError(f"bad override {dotted}={raw}: {exc}") from None
    return replace(cfg, **updates) if updates else cfg
