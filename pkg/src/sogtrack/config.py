"""One configuration object for the whole pipeline, with JSON and dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from .energy import EnergyParams
from .image_sog import QuadTreeParams
from .optimizer import DEFAULT_LR, WindowConfig
from .priors import LossWeights


@dataclass(frozen=True)
class ObjectSoGConfig:
    count: int = 2000
    sigma_factor: float = 3.0
    min_opacity: float = 0.05


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LR))


@dataclass(frozen=True)
class PriorConfig:
    sil_downsample: int = 4
    depth_erosion: int = 1
    gating: bool = True
    hand_align: bool = True
    hand_align_radius: float = 2.0
    hand_align_max_points: int = 2000
    hand_align_erosion: int = 2
    hand_align_keep: float = 0.8


@dataclass(frozen=True)
class KeyframeConfig:
    K: int = 4
    lambda_div: float = 1.0
    mode: str = "greedy"
    seed: int = 0


@dataclass(frozen=True)
class Config:
    energy: EnergyParams = field(default_factory=EnergyParams)
    quadtree: QuadTreeParams = field(default_factory=QuadTreeParams)
    object_sog: ObjectSoGConfig = field(default_factory=ObjectSoGConfig)
    window: WindowConfig = field(default_factory=WindowConfig)
    adamw: AdamWConfig = field(default_factory=AdamWConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    priors: PriorConfig = field(default_factory=PriorConfig)
    keyframes: KeyframeConfig = field(default_factory=KeyframeConfig)
    lambda_temp: float = 0.2

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Optional[Dict[str, Any]] = None) -> "Config":
        return apply_overrides(cls(), d or {})

    @classmethod
    def from_json(cls, path) -> "Config":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _merge(obj, key: str, value):
    if dataclasses.is_dataclass(obj):
        names = {f.name for f in dataclasses.fields(obj)}
        if key not in names:
            raise KeyError(f"unknown config key {key!r} in {type(obj).__name__}")
        cur = getattr(obj, key)
        if dataclasses.is_dataclass(cur) and isinstance(value, dict):
            for k, v in value.items():
                cur = _merge(cur, k, v)
            return dataclasses.replace(obj, **{key: cur})
        if isinstance(cur, dict) and isinstance(value, dict):
            unknown = set(value) - set(cur)
            if unknown:
                raise KeyError(f"unknown config key(s) {sorted(unknown)} in {key}")
            return dataclasses.replace(obj, **{key: {**cur, **value}})
        return dataclasses.replace(obj, **{key: _coerce(cur, value)})
    raise KeyError(key)


def _coerce(cur, value):
    if isinstance(cur, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(cur, int) and not isinstance(cur, bool):
        return int(value)
    if isinstance(cur, float):
        return float(value)
    return value


def apply_overrides(cfg: Config, overrides) -> Config:
    """Apply a nested dict, or ``section.key=value`` strings, on top of ``cfg``."""
    if isinstance(overrides, dict):
        for k, v in overrides.items():
            cfg = _merge(cfg, k, v)
        return cfg
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        nested: Any = value
        for part in reversed(path.split(".")):
            nested = {part: nested}
        cfg = apply_overrides(cfg, nested)
    return cfg


def golden_defaults() -> Dict[str, Any]:
    """Published defaults, written out literally so the config layer can be checked against them."""
    return {
        "energy": {"sigma_c": 0.15, "top_k": 96},
        "quadtree": {"max_depth": 8, "color_variance_threshold": 0.01, "min_cell_size": 2,
                     "bbox_padding": 2, "min_valid_mask_ratio": 1e-6},
        "object_sog": {"count": 2000, "sigma_factor": 3.0},
        "window": {"window_size": 8, "stride": 1, "iterations": 100},
        "adamw": {"beta1": 0.9, "beta2": 0.95,
                  "lr": {"obj_log_s": 1e-3, "hand_log_s": 1e-3, "hand_shape": 1e-4, "obj_t": 2e-3,
                         "hand_t": 1e-3, "obj_q": 2e-3, "hand_q": 1e-4}},
        "weights": {"j2d": 0.5, "depth": 1000.0, "sil": 100.0, "contact": 5000.0, "smooth": 100.0,
                    "energy": 0.05},
    }


def differences(cfg: Config, expected: Dict[str, Any], prefix: str = "") -> Iterable[str]:
    """Dotted keys where ``cfg`` differs from the nested ``expected`` dict."""
    actual = cfg.to_dict() if isinstance(cfg, Config) else cfg
    for k, v in expected.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from differences(actual.get(k, {}), v, key + ".")
        elif actual.get(k) != v:
            yield f"{key}: {actual.get(k)!r} != {v!r}"
