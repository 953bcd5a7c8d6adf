"""One JSON file drives every command.

Sections mirror the dataclasses they build (``world``, ``train``, ``invr``,
``slate``, ``sim``); missing keys take the embedded defaults, unknown keys and
ill-typed values raise :class:`ConfigParse` naming the dotted key.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .embedding import TrainConfig
from .errors import ConfigParse, InvalidConfig
from .invr import InvrConfig
from .sim.harness import VARIANT_NAMES, SimConfig, VariantSpec
from .sim.recommender import SlateConfig
from .sim.world import WorldConfig


def _default_train() -> TrainConfig:
    # smaller than the production-scale default to keep a 3-seed sweep short
    return TrainConfig(dim=32)


def _default_invr() -> InvrConfig:
    # a niche publisher's items share one topic and so the same best users;
    # a wider overfetch lets the capped allocation still fill most quotas
    return InvrConfig(overfetch_factor=7.0, min_exposure=150)


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=_default_train)
    invr: InvrConfig = field(default_factory=_default_invr)
    slate: SlateConfig = field(default_factory=SlateConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    variants: tuple = tuple(VariantSpec(n) for n in VARIANT_NAMES)
    seeds: tuple = (0, 1, 2)
    out_dir: str = "runs"

    def validate(self) -> "ExperimentConfig":
        self.world.validate(), self.train.validate(), self.invr.validate()
        self.slate.validate(), self.sim.validate()
        if not self.seeds:
            raise InvalidConfig("seeds must not be empty")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise InvalidConfig(f"variants must be unique, got {names}")
        if self.slate.slate_size > self.world.n_items:
            raise InvalidConfig("slate.slate_size must not exceed world.n_items")
        return self

    def variant(self, name: str) -> VariantSpec:
        for v in self.variants:
            if v.name == name:
                return v
        return VariantSpec(name)  # raises UnknownVariant for bad names

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seeds=(int(seed),))


# -- conversion --------------------------------------------------------------------


def _is_optional(hint):
    args = typing.get_args(hint)
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0] if len(rest) == 1 else None
    return None


def _coerce(value, hint, key: str):
    inner = _is_optional(hint)
    if inner is not None:
        return None if value is None else _coerce(value, inner, key)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, key)
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        try:
            return hint(value)
        except ValueError:
            choices = [m.value for m in hint]
            raise ConfigParse(f"{key}: {value!r} is not one of {choices}", key=key) from None
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigParse(f"{key}: expected true/false, got {value!r}", key=key)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigParse(f"{key}: expected an integer, got {value!r}", key=key)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigParse(f"{key}: expected a number, got {value!r}", key=key)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigParse(f"{key}: expected a string, got {value!r}", key=key)
        return value
    if hint is tuple:
        if not isinstance(value, list):
            raise ConfigParse(f"{key}: expected a list, got {value!r}", key=key)
        return tuple(value)
    return value


def _build(cls, data, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigParse(f"{prefix or 'config'}: expected an object, got {data!r}", key=prefix or None)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in names:
            raise ConfigParse(f"unknown key {dotted!r}", key=dotted)
        kwargs[key] = _coerce(value, hints[key], dotted)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigParse(f"{prefix or 'config'}: {exc}", key=prefix or None) from exc


def _variant_from(value, key: str) -> VariantSpec:
    if isinstance(value, str):
        value = {"name": value}
    if not isinstance(value, dict) or "name" not in value:
        raise ConfigParse(f"{key}: expected a variant name or an object with 'name'", key=key)
    extra = set(value) - {"name", "invr_overrides"}
    if extra:
        raise ConfigParse(f"unknown key {key}.{sorted(extra)[0]!r}", key=f"{key}.{sorted(extra)[0]}")
    overrides = value.get("invr_overrides", {})
    hints = typing.get_type_hints(InvrConfig)
    for name, v in overrides.items():
        if name not in hints or name == "ordering_mode":
            raise ConfigParse(f"{key}.invr_overrides: cannot override {name!r}", key=f"{key}.invr_overrides.{name}")
        overrides[name] = _coerce(v, hints[name], f"{key}.invr_overrides.{name}")
    try:
        return VariantSpec(value["name"], dict(overrides))
    except InvalidConfig as exc:
        raise ConfigParse(f"{key}: {exc}", key=key) from exc
    except ValueError as exc:  # UnknownVariant
        raise ConfigParse(f"{key}: {exc}", key=f"{key}.name") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigParse("config: top level must be an object")
    data = dict(data)
    variants = data.pop("variants", None)
    seeds = data.pop("seeds", None)
    cfg = _build(ExperimentConfig, data)
    if variants is not None:
        if not isinstance(variants, list):
            raise ConfigParse("variants: expected a list", key="variants")
        cfg = dataclasses.replace(cfg, variants=tuple(_variant_from(v, f"variants[{k}]")
                                                       for k, v in enumerate(variants)))
    if seeds is not None:
        if not isinstance(seeds, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigParse("seeds: expected a list of integers", key="seeds")
        cfg = dataclasses.replace(cfg, seeds=tuple(seeds))
    return cfg


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = _plain(cfg)
    out["variants"] = [
        {"name": v.name, "invr_overrides": _plain(v.invr_overrides)} if v.invr_overrides else v.name
        for v in cfg.variants
    ]
    return out


def dumps(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=False) + "\n"


def loads(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParse(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(data)


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigParse(f"cannot read config {path}: {exc.strerror}") from exc
    return loads(text)


def save(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg))
