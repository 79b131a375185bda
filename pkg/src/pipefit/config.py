"""Run configuration: JSON file merged with command-line overrides, hashed for provenance."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields

from .cylinder import DetectConfig
from .ellipse import EllipseGate
from .errors import ConfigError
from .io import dumps_json, read_json

UNIT_FACTORS = {"_m": 1.0, "_mm": 1e-3}


@dataclass
class FramesConfig:
    ov_min: float = 0.90
    ov_max: float | None = None
    max_iters: int = 20


@dataclass
class ScaleConfig:
    eccentricity: bool = True


@dataclass
class RunConfig:
    detect: DetectConfig = field(default_factory=DetectConfig)
    frames: FramesConfig = field(default_factory=FramesConfig)
    scale: ScaleConfig = field(default_factory=ScaleConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Short digest of the canonical JSON form."""
        return hashlib.sha256(dumps_json(self.to_dict()).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = cls()
        _merge(cfg, data, "")
        return cfg

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        cfg = cls.from_dict(read_json(path)) if path else cls()
        if overrides:
            _merge(cfg, overrides, "")
        return cfg


def _resolve_key(obj, key: str, where: str) -> tuple[str, float]:
    """Field name for ``key`` and the factor converting its unit to the field's unit."""
    names = {f.name for f in fields(obj)}
    if key in names:
        return key, 1.0
    for suffix, factor in UNIT_FACTORS.items():
        if key.endswith(suffix):
            base = key[: -len(suffix)]
            for target, tfactor in UNIT_FACTORS.items():
                if base + target in names:
                    return base + target, factor / tfactor
    raise ConfigError(f"unknown config key: {where}{key}")


def _merge(obj, data: dict, where: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"config section {where or '<root>'} must be an object")
    for key, value in data.items():
        name, factor = _resolve_key(obj, key, where)
        current = getattr(obj, name)
        if isinstance(current, (DetectConfig, EllipseGate, FramesConfig, ScaleConfig)):
            _merge(current, value, f"{where}{name}.")
            continue
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}{key} must be a boolean")
        elif isinstance(current, tuple):
            value = tuple(float(v) for v in value)
        elif value is not None and (isinstance(current, (int, float)) or current is None):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}{key} must be numeric")
            value = value * factor
            if isinstance(current, int) and factor == 1.0:
                if value != int(value):
                    raise ConfigError(f"{where}{key} must be an integer")
                value = int(value)
        elif isinstance(current, str) and not isinstance(value, str):
            raise ConfigError(f"{where}{key} must be a string")
        setattr(obj, name, value)
