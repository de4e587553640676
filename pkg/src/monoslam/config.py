"""Flat key=value configuration with typed defaults and CLI overrides."""

from __future__ import annotations

__all__ = ["DEFAULTS", "ConfigError", "load_config", "parse_overrides"]


DEFAULTS: dict[str, object] = {
    # feature extraction
    "features.total_keypoints": 3000,
    "features.pyramid_levels": 3,
    "features.scale_factor": 1.2,
    "features.descriptor_dim": 256,
    # two-stage tracking
    "tracking.search_radius": 7.0,
    "tracking.hamming_max": 64,
    "tracking.use_coarse": True,
    "tracking.max_kf_interval": 20,
    "tracking.kf_tracked_ratio": 0.9,
    "tracking.min_tracked": 10,
    # local mapping
    "mapping.local_ba_iters": 10,
    # loop closing
    "loop.enabled": True,
    "loop.min_matches": 20,
    "loop.global_ba_iters": 10,
    # run
    "run.seed": 0,
    "run.min_bootstrap_matches": 40,
    "run.min_bootstrap_parallax_px": 1.0,
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"key {key!r} expects a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: {exc}") from exc
    return raw


def parse_overrides(pairs) -> dict:
    """Parse `key=value` strings against the known defaults."""
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, _, raw = pair.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def load_config(path=None, overrides=None) -> dict:
    """Defaults, then the optional file, then key=value overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key, _, raw = line.partition("=")
                key = key.strip()
                if key not in DEFAULTS:
                    raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
                cfg[key] = _coerce(key, raw)
    cfg.update(parse_overrides(overrides))
    return cfg
