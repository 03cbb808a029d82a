"""Run configuration for the command-line harness.

Config files are line-oriented ``key = value`` text with ``#`` comments.
Keys map one-to-one onto RunConfig fields; unknown or duplicate keys are
rejected so typos fail loudly before any computation starts. Values are
converted to the field's declared type (comma-separated for tuples).
Command-line ``--set key=value`` overrides are applied after the file,
so flags win.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass

from .homography import HomographyConfig
from .losses import LossConfig
from .train import TrainConfig


class ConfigError(Exception):
    """Malformed configuration text, unknown key, or invalid value."""


@dataclass(frozen=True)
class RunConfig:
    # --- paths ---
    frames_dir: str = ""
    mask_path: str = ""  # optional circular-FOV mask (PGM, nonzero = inside)
    weights_path: str = ""
    output_dir: str = "out"
    labels_dir: str = ""  # default: <output_dir>/labels
    features_dir: str = ""  # default: <output_dir>/features
    matches_dir: str = ""  # default: <output_dir>/matches
    pose_path: str = ""  # optional reference poses
    intrinsics_path: str = ""  # optional pinhole intrinsics
    # --- detection (test-time) ---
    detection_threshold: float = 0.015
    detection_nms_window: int = 3
    max_features: int = 10000
    # --- pseudo-labels (teacher) ---
    label_threshold: float = 0.015
    label_nms_window: int = 9
    label_max_points: int = 600
    # --- robust estimation ---
    ransac_confidence: float = 0.9999
    ransac_threshold_px: float = 3.0
    # --- evaluation ---
    steps: tuple[int, ...] = (1,)
    models: str = "auto"  # "auto" or comma list drawn from H,E,F
    method: str = "learned"  # name used when writing features
    methods: tuple[str, ...] = ()  # evaluated methods; default: (method,)
    # --- loss weights ---
    descriptor_weight: float = 0.0001
    correspondence_weight: float = 250.0
    margin_positive: float = 1.0
    margin_negative: float = 0.2
    specularity_weight: float = 100.0
    negative_keep: float = 1.0
    # --- training ---
    iterations: int = 100
    learning_rate: float = 1e-5
    batch_size: int = 2
    checkpoint_every: int = 0
    # --- homography sampling amplitudes ---
    homography_perspective: float = 0.05
    homography_scale_min: float = 0.8
    homography_scale_max: float = 1.2
    homography_rotation_deg: float = 25.0
    homography_translation: float = 0.1
    # --- misc ---
    seed: int = 0
    jobs: int = 1


_HINTS = typing.get_type_hints(RunConfig)
_BOOL_WORDS = {
    "true": True,
    "false": False,
    "yes": True,
    "no": False,
    "1": True,
    "0": False,
}


def _convert(kind, key: str, raw: str):
    try:
        if kind is str:
            return raw
        if kind is bool:
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL_WORDS[raw.lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: {exc}") from None
    raise ConfigError(f"key {key!r} has unsupported type {kind!r}")


def parse_value(key: str, raw: str):
    """Convert raw text to the declared type of the RunConfig field."""
    if key not in _HINTS:
        raise ConfigError(f"unknown key {key!r}")
    hint = _HINTS[key]
    if typing.get_origin(hint) is tuple:
        elem = typing.get_args(hint)[0]
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(_convert(elem, key, p) for p in parts)
    return _convert(hint, key, raw)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse `key = value` lines on top of `base` (defaults when omitted)."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.rstrip()!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = parse_value(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    base = base if base is not None else RunConfig()
    return dataclasses.replace(base, **values)


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config_text(text, base)


def apply_overrides(config: RunConfig, overrides) -> RunConfig:
    """Apply `key=value` strings (e.g. from --set flags); later ones win."""
    values = {}
    for item in overrides:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"override {item!r}: expected key=value")
        values[key] = parse_value(key, raw.strip())
    return dataclasses.replace(config, **values)


# ---------------------------------------------------------------------------
# derived paths and per-module config objects
# ---------------------------------------------------------------------------


def labels_dir(config: RunConfig) -> str:
    return config.labels_dir or os.path.join(config.output_dir, "labels")


def features_dir(config: RunConfig, method: str) -> str:
    base = config.features_dir or os.path.join(config.output_dir, "features")
    return os.path.join(base, method)


def matches_dir(config: RunConfig, method: str, step: int) -> str:
    base = config.matches_dir or os.path.join(config.output_dir, "matches")
    return os.path.join(base, method, f"step_{step}")


def method_names(config: RunConfig) -> tuple:
    return config.methods if config.methods else (config.method,)


def model_tags(config: RunConfig):
    """'auto' or an explicit tuple of robust-model tags."""
    if config.models.strip() == "auto":
        return "auto"
    tags = tuple(t.strip() for t in config.models.split(",") if t.strip())
    for t in tags:
        if t not in ("H", "E", "F"):
            raise ConfigError(f"unknown model tag {t!r} (expected H, E, or F)")
    if not tags:
        raise ConfigError("models must be 'auto' or a comma list of H,E,F")
    return tags


def homography_config(config: RunConfig) -> HomographyConfig:
    try:
        return HomographyConfig(
            perspective=config.homography_perspective,
            scale_min=config.homography_scale_min,
            scale_max=config.homography_scale_max,
            rotation_deg=config.homography_rotation_deg,
            translation=config.homography_translation,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def loss_config(config: RunConfig) -> LossConfig:
    try:
        return LossConfig(
            descriptor_weight=config.descriptor_weight,
            correspondence_weight=config.correspondence_weight,
            margin_positive=config.margin_positive,
            margin_negative=config.margin_negative,
            specularity_weight=config.specularity_weight,
            negative_keep=config.negative_keep,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config(config: RunConfig) -> TrainConfig:
    try:
        return TrainConfig(
            iterations=config.iterations,
            learning_rate=config.learning_rate,
            batch_size=config.batch_size,
            seed=config.seed,
            checkpoint_every=config.checkpoint_every,
            homography=homography_config(config),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
