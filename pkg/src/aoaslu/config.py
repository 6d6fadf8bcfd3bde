"""Flat ``key=value`` run configuration covering model, training and builder settings.

Keys are ``section.field`` (``model.d``, ``train.epochs``, ``builder.tau``)
plus ``run.*`` for paths and the master seed. Tuples are comma separated;
conjunction pools use ``phrase:weight`` items. Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
from dataclasses import MISSING, fields
from pathlib import Path
from typing import Iterable

from .builder import BuilderConfig
from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "builder": BuilderConfig}
RUN_DEFAULTS = {"run.seed": 0, "run.workers": 1, "run.output_dir": ""}
# Derived from the data at train time, so not user settable.
DERIVED = {"model.vocab_size", "model.n_categories"}


def _defaults() -> dict:
    out = dict(RUN_DEFAULTS)
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            key = f"{section}.{f.name}"
            if key in DERIVED:
                continue
            default = f.default if f.default is not MISSING else f.default_factory()
            out[key] = default
    return out


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        items = []
        for x in v:
            items.append(f"{x[0]}:{x[1]!r}" if isinstance(x, tuple) else (repr(x) if isinstance(x, float) else str(x)))
        return ",".join(items)
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def _parse(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [x.strip() for x in text.split(",") if x.strip()]
            if default and isinstance(default[0], tuple):
                pairs = []
                for item in items:
                    phrase, _, weight = item.rpartition(":")
                    pairs.append((phrase, float(weight)))
                return tuple(pairs)
            if default and isinstance(default[0], float):
                return tuple(float(x) for x in items)
            return tuple(items)
        if default is None:
            return text or None
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = _defaults()
        if values:
            self.update(values)

    def update(self, values: dict) -> None:
        for k, v in values.items():
            if k not in self.values:
                raise ConfigError(f"unknown config key {k!r}")
            self.values[k] = _parse(k, v, self.values[k]) if isinstance(v, str) else v

    def set_pairs(self, pairs: Iterable[str]) -> None:
        parsed = {}
        for item in pairs:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"expected key=value, got {item!r}")
            parsed[key.strip()] = value
        self.update(parsed)

    @classmethod
    def load(cls, path) -> RunConfig:
        cfg = cls()
        parsed = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            parsed[key.strip()] = value
        cfg.update(parsed)
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def model_config(self, **derived) -> ModelConfig:
        return ModelConfig(**{**self.section("model"), **derived})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.section("train"))

    def builder_config(self) -> BuilderConfig:
        return BuilderConfig(**self.section("builder"))

    def echo(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in sorted(self.values.items()))


def git_blob_hash(data: bytes) -> str:
    """Content hash computed the way git names blob objects."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(path, command: str, argv, config: RunConfig, inputs: dict, extra: dict | None = None) -> None:
    """Everything needed to rerun a CLI invocation: argv, config echo, seed, input hashes."""
    lines = [f"command={command}", "argv=" + " ".join(argv), f"seed={config['run.seed']}"]
    for label, p in sorted(inputs.items()):
        if p:
            lines.append(f"input.{label}={p}")
            lines.append(f"input.{label}.hash={git_blob_hash(Path(p).read_bytes())}")
    for k, v in sorted((extra or {}).items()):
        lines.append(f"{k}={v}")
    Path(path).write_text("\n".join(lines) + "\n" + "".join("config." + line + "\n" for line in config.echo().splitlines()),
                          encoding="utf-8")
