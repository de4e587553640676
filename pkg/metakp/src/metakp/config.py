"""Flat key=value training configuration mirroring MamlConfig."""

from __future__ import annotations

from dataclasses import fields

from .maml import MamlConfig

__all__ = ["load_maml_config"]


def load_maml_config(path=None, overrides=None) -> MamlConfig:
    """Build a MamlConfig from an optional key=value file plus overrides."""
    types = {f.name: f.type for f in fields(MamlConfig)}
    raw: dict = {}

    def take(key: str, value: str):
        key = key.strip()
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        caster = int if key in ("m", "batch", "iterations") else float
        raw[key] = caster(value)

    if path is not None:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected key=value")
                take(*line.split("=", 1))
    for pair in overrides or []:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not key=value")
        take(*pair.split("=", 1))
    return MamlConfig(**raw)
