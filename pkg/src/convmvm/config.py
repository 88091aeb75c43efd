"""Flat key=value run configuration: UTF-8 text, '#' comments, one key per line.

Every field of TrainConfig, EncoderConfig, and DecoderConfig must be present
under its exact field name; list-valued fields use comma separation
(stage_depths=2,2 and betas=0.9,0.95). The raw text is echoed into manifests
and checkpoints so a run is reproducible from its artifacts alone.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from typing import get_type_hints

from .errors import ConfigError
from .model import DecoderConfig, EncoderConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    encoder: EncoderConfig
    decoder: DecoderConfig
    text: str  # exact text this config was parsed from


_BOOLS = {"true": True, "false": False, "1": True, "0": False}


def _parse_value(key: str, raw: str, typ):
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is bool:
            return _BOOLS[raw.lower()]
        if typ is str:
            return raw
        if typ == tuple[int, ...]:
            return tuple(int(v) for v in raw.split(","))
        if typ == tuple[float, float]:
            vals = tuple(float(v) for v in raw.split(","))
            if len(vals) != 2:
                raise ValueError(f"expected two values, got {len(vals)}")
            return vals
    except (ValueError, KeyError) as e:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} ({e})") from None
    raise ConfigError(f"config key {key!r}: unsupported field type {typ}")


def _render_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_render_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str) -> RunConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in pairs:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        pairs[key] = value

    def build(cls):
        hints = get_type_hints(cls)
        kwargs = {}
        for f in fields(cls):
            if f.name not in pairs:
                raise ConfigError(f"missing config key: {f.name}")
            kwargs[f.name] = _parse_value(f.name, pairs.pop(f.name), hints[f.name])
        return cls(**kwargs)

    train = build(TrainConfig)
    encoder = build(EncoderConfig)
    decoder = build(DecoderConfig)
    if pairs:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(pairs))}")
    return RunConfig(train, encoder, decoder, text)


def render_config(train: TrainConfig, encoder: EncoderConfig, decoder: DecoderConfig) -> str:
    lines = []
    for section, cfg in (("training", train), ("encoder", encoder), ("decoder", decoder)):
        lines.append(f"# {section}")
        for f in fields(type(cfg)):
            lines.append(f"{f.name}={_render_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def config_hash(text: str) -> str:
    """Git-style content hash: sha1 over a 'blob <len>\\0' header plus the text."""
    body = text.encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def default_config() -> RunConfig:
    text = render_config(TrainConfig(), EncoderConfig(), DecoderConfig())
    return parse_config(text)
