"""Run configuration in a plain key-value text format.

One ``dotted.key = value`` per line; ``#`` starts a comment. Keys mirror the
dataclass fields, e.g.::

    net.channels = 8
    net.blocks.hr_per_group = 3
    train.iters = 300
    eval.overlap = 32

Unknown keys are rejected. ``dump`` writes every key, and ``load`` of that
text reproduces the configuration exactly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .model import NetConfig
from .train import TrainConfig


@dataclass
class EvalConfig:
    tile: int = 512
    overlap: int = 32


@dataclass
class RunConfig:
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.net.validate()
        self.train.validate(self.net)


def desk_config() -> RunConfig:
    """Small profile that trains on one CPU in minutes."""
    cfg = RunConfig()
    cfg.net.channels = 8
    cfg.net.pfi_count = 2
    cfg.train.patch = 128
    cfg.train.iters = 300
    cfg.train.batch = 4
    return cfg


PRESETS = {"default": RunConfig, "full": RunConfig, "desk": desk_config}


def flatten(obj: Any, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(val):
            out.update(flatten(val, key + "."))
        else:
            out[key] = val
    return out


def _parse_value(text: str, current: Any, key: str) -> Any:
    text = text.strip()
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, (list, tuple)):
            return json.loads(text)
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(current).__name__}") from exc
    return text


def _format_value(val: Any) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        return repr(val)
    if isinstance(val, (list, tuple)):
        return json.dumps(list(val))
    return str(val)


def set_key(cfg: RunConfig, key: str, text: str) -> None:
    parts = key.strip().split(".")
    obj = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(obj) or p not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(obj, p)
    last = parts[-1]
    if not dataclasses.is_dataclass(obj) or last not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(obj, last)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"{key!r} is a section, not a value")
    setattr(obj, last, _parse_value(text, current, key))


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        set_key(cfg, k, v)
    cfg.validate()
    return cfg


def parse(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        set_key(cfg, k, v)
    cfg.validate()
    return cfg


def load(source: str | Path | None) -> RunConfig:
    """A preset name (default, full, desk) or a path to a config file."""
    if source is None:
        return RunConfig()
    if str(source) in PRESETS:
        return PRESETS[str(source)]()
    path = Path(source)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text)


def dump(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in flatten(cfg).items())
