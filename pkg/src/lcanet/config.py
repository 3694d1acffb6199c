"""Run configuration as a flat ``key=value`` text file.

Keys are dotted paths into :class:`RunConfig`, e.g.
``model.stage_channels=16,32,64,64,64`` or ``model.lcb.scales=0.1,0.3,0.5``.
Tuples are comma separated, booleans are ``true``/``false`` and optional
values accept ``none``. ``#`` starts a comment. Unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentConfig
from .network import ModelConfig
from .objectives import LossConfig, OptimizerConfig

SEED_ENV = "LCANET_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data_dir: str = "data/train"
    val_dir: str | None = None
    out_dir: str = "runs/default"
    seed: int = 0

    def validate(self) -> None:
        try:
            self.model.validate()
            self.loss.validate()
            self.optim.validate()
            self.augment.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.augment.crop_to is not None and tuple(self.augment.crop_to) != tuple(self.model.input_size):
            raise ConfigError(
                f"augment.crop_to {self.augment.crop_to} must equal model.input_size {self.model.input_size}"
            )


def _parse_scalar(text: str, kind, key: str):
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {text!r}")
    if kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from None
    if kind is str:
        return text
    raise ConfigError(f"{key}: unsupported type {kind}")


def _parse(text: str, hint, key: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if text.lower() == "none":
            return None
        return _parse(text, args[0], key)
    if origin is tuple:
        args = typing.get_args(hint)
        items = [t for t in text.split(",") if t.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse_scalar(t.strip(), args[0], key) for t in items)
        if len(items) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_parse_scalar(t.strip(), a, key) for t, a in zip(items, args))
    return _parse_scalar(text, hint, key)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _leaves(obj, prefix: str = ""):
    hints = typing.get_type_hints(type(obj))
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            yield from _leaves(value, key + ".")
        else:
            yield key, obj, f.name, hints[f.name]


def keys() -> list[str]:
    return [k for k, *_ in _leaves(RunConfig())]


def apply(cfg: RunConfig, key: str, value: str) -> None:
    for k, owner, name, hint in _leaves(cfg):
        if k == key:
            setattr(owner, name, _parse(value, hint, key))
            return
    raise ConfigError(f"unknown config key {key!r}")


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        try:
            apply(cfg, key.strip(), value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k}={_format(getattr(owner, name))}\n" for k, owner, name, _ in _leaves(cfg))


def load(path, env=None) -> RunConfig:
    """Read, apply the ``LCANET_SEED`` override and validate."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = parse(text)
    override(cfg, env)
    cfg.validate()
    return cfg


def override(cfg: RunConfig, env=None) -> RunConfig:
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return cfg


def save(path, cfg: RunConfig) -> None:
    Path(path).write_text(dumps(cfg))
