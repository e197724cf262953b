"""Line-oriented ``key = value`` configuration files.

Blank lines and ``#`` comments are ignored.  Keys are the field names of
:class:`ModelConfig`, :class:`TrainConfig` and :class:`DecodeConfig`; values
are parsed to the type of the field's default.  ``vocab_size`` is normally
filled in from the vocabulary rather than the file.

Example::

    # two-phase protocol, phase one
    mode = dgd
    temperature = 0.2
    label_smoothing = 0.15
    warmup_steps = 4000
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .decode import DecodeConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _field_types(cls) -> dict[str, type]:
    out = {}
    for f in fields(cls):
        if f.default is not dataclasses.MISSING:
            d = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            d = f.default_factory()  # type: ignore[misc]
        else:
            d = 0
        out[f.name] = type(d)
    return out


# label_smoothing lives in both model and train configs; one key sets both
_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "decode": DecodeConfig}
_TYPES: dict[str, type] = {}
for _cls in _SECTIONS.values():
    _TYPES.update(_field_types(_cls))
_TYPES["vocab_size"] = int
_TYPES["temperature"] = float
_TYPES["max_len"] = int


def _parse_value(key: str, raw: str):
    t = _TYPES[key]
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    try:
        if t is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t is int:
            return int(raw)
        if t is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {t.__name__}") from None


@dataclass
class RunConfig:
    """Overrides read from a file; unspecified keys keep their defaults."""

    values: dict = field(default_factory=dict)

    def model(self, **extra) -> ModelConfig:
        return _build(ModelConfig, {**self.values, **extra})

    def train(self, **extra) -> TrainConfig:
        return _build(TrainConfig, {**self.values, **extra})

    def decode(self, **extra) -> DecodeConfig:
        return _build(DecodeConfig, {**self.values, **extra})


def _build(cls, values: dict):
    names = {f.name for f in fields(cls)}
    kw = {k: v for k, v in values.items() if k in names and v is not None}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{cls.__name__}: {e}") from e


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return RunConfig(values)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    return parse_config(text, str(path))


def default_config_text() -> str:
    """Every recognised key with its default, as a config file."""
    lines = []
    seen = set()
    for section, cls in _SECTIONS.items():
        lines.append(f"# {section}")
        for f in fields(cls):
            if f.name in seen or f.name == "vocab_size":
                continue
            seen.add(f.name)
            d = f.default if f.default is not dataclasses.MISSING else None
            lines.append(f"{f.name} = {'none' if d is None else d}")
    return "\n".join(lines) + "\n"
