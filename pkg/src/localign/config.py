"""Flat key=value configuration: parsing, canonical rendering, hashing.

Config files are plain text, one ``dotted.key=value`` per line, with ``#``
comments and blank lines allowed.  The same dotted keys are accepted by the
command line's repeatable ``--set key=value`` flag, which takes precedence
over the file.  Unknown keys are rejected by name.

Value syntax by type:

* numbers: ``train.learning_rate=0.0001``
* booleans: ``true``/``false`` (also ``1``/``0``, ``yes``/``no``)
* optional integers: an integer or ``none``
* numeric lists/ranges: comma-separated, e.g. ``augment.scaling=0.95,1.05``
* string lists: ``|``-separated, e.g. ``world.finding_names=edema|nodule``
* enums: their lowercase name, e.g. ``train.schedule=cosine``

The canonical rendering (:func:`flatten_config`) uses exactly this syntax,
so hash → render → parse round-trips, and :func:`config_hash` is a stable
fingerprint of a configuration tree.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

__all__ = [
    "ConfigError",
    "config_hash",
    "known_keys",
    "data_options_from_flat",
    "flatten_config",
    "full_flat_config",
    "merge_flat",
    "parse_config_text",
    "parse_kv",
    "render_value",
    "train_config_from_flat",
    "validate_flat",
    "validate_keys",
    "world_config_from_flat",
]


class ConfigError(ValueError):
    """A config file, key, or value is invalid; the message names the key."""


# ---- parsing the flat text form ---------------------------------------------


def parse_kv(item: str) -> Tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"expected key=value, got {item!r}")
    key, _, value = item.partition("=")
    key, value = key.strip(), value.strip()
    if not key:
        raise ConfigError(f"empty key in {item!r}")
    return key, value


def parse_config_text(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            key, value = parse_kv(line)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def merge_flat(base: Mapping[str, str], overrides: Mapping[str, str]) -> Dict[str, str]:
    merged = dict(base)
    merged.update(overrides)
    return merged


# ---- canonical rendering and hashing ----------------------------------------


def render_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return render_value(value.value)
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ",".join(render_value(v) for v in value) if value and not isinstance(value[0], str) else "|".join(
            str(v) for v in value
        )
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten_config(obj: object, prefix: str = "") -> Dict[str, str]:
    """Dataclass tree -> {dotted key: canonical value string}, sorted keys."""
    flat: Dict[str, str] = {}
    if not dataclasses.is_dataclass(obj):
        raise ConfigError(f"cannot flatten a non-dataclass value under {prefix!r}")
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            flat.update(flatten_config(value, prefix=f"{key}."))
        else:
            flat[key] = render_value(value)
    return dict(sorted(flat.items()))


def config_hash(flat: Mapping[str, str]) -> str:
    lines = "\n".join(f"{k}={flat[k]}" for k in sorted(flat))
    return hashlib.sha256(lines.encode("utf-8")).hexdigest()


# ---- typed value parsers -----------------------------------------------------


def _parse_bool(key: str, value: str) -> bool:
    low = value.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def _parse_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from exc


def _parse_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from exc


def _parse_optional_int(key: str, value: str) -> Optional[int]:
    if value.lower() == "none":
        return None
    return _parse_int(key, value)


def _parse_float_tuple(key: str, value: str, arity: Optional[int] = None) -> Tuple[float, ...]:
    parts = [p.strip() for p in value.split(",") if p.strip()]
    if arity is not None and len(parts) != arity:
        raise ConfigError(f"{key}: expected {arity} comma-separated numbers, got {value!r}")
    return tuple(_parse_float(key, p) for p in parts)


def _parse_int_tuple(key: str, value: str, arity: Optional[int] = None) -> Tuple[int, ...]:
    parts = [p.strip() for p in value.split(",") if p.strip()]
    if arity is not None and len(parts) != arity:
        raise ConfigError(f"{key}: expected {arity} comma-separated integers, got {value!r}")
    return tuple(_parse_int(key, p) for p in parts)


def _parse_str_tuple(key: str, value: str) -> Tuple[str, ...]:
    parts = [p.strip() for p in value.split("|") if p.strip()]
    if not parts:
        raise ConfigError(f"{key}: expected a |-separated list, got {value!r}")
    return tuple(parts)


def _parse_enum(key: str, value: str, enum_cls):
    for member in enum_cls:
        if value.lower() == str(member.value).lower():
            return member
    allowed = ", ".join(str(m.value) for m in enum_cls)
    raise ConfigError(f"{key}: expected one of {allowed}, got {value!r}")


# ---- per-section field tables ------------------------------------------------
# Each entry: field name -> function(key, raw string) -> typed value.
# Sections are materialized lazily to avoid import cycles with the modules
# that define the dataclasses.


def _train_field_parsers() -> Dict[str, Callable[[str, str], object]]:
    from .training import Schedule

    return {
        "epochs": _parse_int,
        "learning_rate": _parse_float,
        "schedule": lambda k, v: _parse_enum(k, v, Schedule),
        "batch_size": _parse_int,
        "seed": _parse_int,
        "val_fraction": _parse_float,
        "early_stop_patience": _parse_optional_int,
        "grad_accum_steps": _parse_int,
        "step_milestones": lambda k, v: _parse_int_tuple(k, v),
        "step_gamma": _parse_float,
        "plateau_patience": _parse_int,
        "plateau_factor": _parse_float,
        "polarity_calibration": _parse_bool,
    }


def _augment_field_parsers() -> Dict[str, Callable[[str, str], object]]:
    pair = lambda k, v: _parse_float_tuple(k, v, arity=2)  # noqa: E731
    return {
        "enabled": _parse_bool,
        "rotation_degrees": pair,
        "scaling": pair,
        "brightness": pair,
        "contrast": pair,
        "horizontal_flip_prob": _parse_float,
        "crop_area": pair,
        "blur_sigma": pair,
        "blur_kernel_size": _parse_int,
    }


def _loss_field_parsers() -> Dict[str, Callable[[str, str], object]]:
    from .losses import Reduction

    return {
        "tau_global": _parse_float,
        "tau_local_source": _parse_float,
        "tau_local_target": _parse_float,
        "lambdas": lambda k, v: _parse_float_tuple(k, v, arity=4),
        "target_gradient_blocked": _parse_bool,
        "reduction": lambda k, v: _parse_enum(k, v, Reduction),
        "mask_self_similarity_diagonal": _parse_bool,
    }


def _model_field_parsers() -> Dict[str, Callable[[str, str], object]]:
    return {
        "grid": _parse_int,
        "image_channels": _parse_int,
        "dim_image": _parse_int,
        "dim_text": _parse_int,
        "hidden": _parse_int,
        "vocab_hash_dim": _parse_int,
        "max_sentences": _parse_int,
        "joint_dim": _parse_int,
        "cross_attention_row_softmax": _parse_bool,
    }


def _world_field_parsers() -> Dict[str, Callable[[str, str], object]]:
    int_pair = lambda k, v: _parse_int_tuple(k, v, arity=2)  # noqa: E731
    return {
        "grid": _parse_int,
        "image_size": _parse_int,
        "channels": _parse_int,
        "seed": _parse_int,
        "roi_count_range": int_pair,
        "roi_height_range": int_pair,
        "roi_width_range": int_pair,
        "finding_names": _parse_str_tuple,
        "palette_low": _parse_float,
        "palette_high": _parse_float,
        "palette_min_separation": _parse_float,
        "background_exclusion": _parse_float,
        "cell_jitter": _parse_float,
        "pixel_noise": _parse_float,
        "duplicate_sentence_prob": _parse_float,
        "bilateral_prob": _parse_float,
        "filler_sentences": _parse_str_tuple,
        "filler_count_range": int_pair,
    }


_DATA_KEYS = {"data.count": _parse_int, "data.start": _parse_int}

_SECTION_PARSERS = {
    "train": _train_field_parsers,
    "augment": _augment_field_parsers,
    "loss": _loss_field_parsers,
    "model": _model_field_parsers,
    "world": _world_field_parsers,
}


def _known_keys() -> Dict[str, Callable[[str, str], object]]:
    table: Dict[str, Callable[[str, str], object]] = {}
    for section, factory in _SECTION_PARSERS.items():
        prefix = section if section != "train" else "train"
        for field_name, parser in factory().items():
            if section in ("augment", "loss", "model"):
                table[f"train.{section}.{field_name}"] = parser
                # Short aliases: augment.*, loss.*, model.* are accepted too.
                table[f"{section}.{field_name}"] = parser
            else:
                table[f"{prefix}.{field_name}"] = parser
    table.update(_DATA_KEYS)
    return table


def known_keys() -> frozenset:
    """The full documented key set (computed lazily to avoid import cycles)."""
    return frozenset(_known_keys())


def validate_keys(flat: Mapping[str, str]) -> None:
    """Reject any key outside the documented set, naming the first offender."""
    known = _known_keys()
    for key in sorted(flat):
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")


def validate_flat(flat: Mapping[str, str]) -> None:
    """Reject unknown keys and unparseable values, naming the offender."""
    table = _known_keys()
    for key in sorted(flat):
        if key not in table:
            raise ConfigError(f"unknown config key {key!r}")
        table[key](key, flat[key])


def _section_values(
    flat: Mapping[str, str], prefixes: Sequence[str], parsers: Dict[str, Callable]
) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for key, raw in flat.items():
        for prefix in prefixes:
            head = prefix + "."
            if key.startswith(head):
                field_name = key[len(head) :]
                if field_name in parsers:
                    values[field_name] = parsers[field_name](key, raw)
    return values


def train_config_from_flat(flat: Mapping[str, str]):
    """Materialize a TrainConfig (with nested sections) from flat keys."""
    from .losses import LossConfig
    from .model import ModelConfig
    from .training import AugmentConfig, TrainConfig

    validate_keys(flat)
    train_kwargs = {
        k: v
        for k, v in _section_values(flat, ["train"], _train_field_parsers()).items()
    }
    # Drop nested keys that the shallow scan above may have matched oddly.
    augment_kwargs = _section_values(flat, ["train.augment", "augment"], _augment_field_parsers())
    loss_kwargs = _section_values(flat, ["train.loss", "loss"], _loss_field_parsers())
    model_kwargs = _section_values(flat, ["train.model", "model"], _model_field_parsers())
    cfg = TrainConfig(
        **train_kwargs,
        augment=AugmentConfig(**augment_kwargs),
        loss=LossConfig(**loss_kwargs),
        model=ModelConfig(**model_kwargs),
    )
    cfg.validate()
    return cfg


def world_config_from_flat(flat: Mapping[str, str]):
    """Materialize a SyntheticWorldConfig from flat keys."""
    from .synthetic import SyntheticWorldConfig

    validate_keys(flat)
    kwargs = _section_values(flat, ["world"], _world_field_parsers())
    cfg = SyntheticWorldConfig(**kwargs)
    cfg.validate()
    return cfg


def data_options_from_flat(flat: Mapping[str, str]) -> Dict[str, int]:
    """Dataset-size options: {'count': ..., 'start': ...} with defaults."""
    validate_keys(flat)
    return {
        "count": _DATA_KEYS["data.count"]("data.count", flat.get("data.count", "200")),
        "start": _DATA_KEYS["data.start"]("data.start", flat.get("data.start", "0")),
    }


def full_flat_config(train_cfg=None, world_cfg=None, data: Optional[Mapping[str, int]] = None) -> Dict[str, str]:
    """Canonical flat rendering of resolved configs, for manifests and hashing."""
    flat: Dict[str, str] = {}
    if train_cfg is not None:
        for key, value in flatten_config(train_cfg, prefix="train.").items():
            flat[key] = value
    if world_cfg is not None:
        flat.update(flatten_config(world_cfg, prefix="world."))
    if data is not None:
        for name, value in data.items():
            flat[f"data.{name}"] = render_value(value)
    return dict(sorted(flat.items()))
