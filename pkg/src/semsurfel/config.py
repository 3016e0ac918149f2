"""Run configuration: raster geometry, filter parameters and thresholds.

Configs are stored as flat YAML key/value files. Every field of
:class:`RunConfig` can be overridden from the command line.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

# SemanticKITTI ids of cars, bicycles, buses, motorcycles, trucks, other
# vehicles, persons, bicyclists, motorcyclists and their "moving-*" twins.
DEFAULT_MOVABLE = (10, 11, 13, 15, 18, 20, 30, 31, 32, 252, 253, 254, 255, 257, 258, 259)

_ODDS_06 = math.log(0.6 / 0.4)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # raster geometry
    width: int = 900
    height: int = 64
    fov_up: float = 3.0
    fov_down: float = -25.0
    min_range: float = 0.5
    max_range: float = 120.0
    discontinuity_ratio: float = 0.3

    # stability filter
    p_stable: float = 0.6
    p_prior: float = 0.5
    p_penalty: float = 0.6
    sigma_alpha: float = 0.0873
    sigma_d: float = 0.1
    l_stable: float = 5 * _ODDS_06
    l_unstable: float = -2 * _ODDS_06
    grace_frames: int = 5
    alpha_max_deg: float = 30.0
    d_max: float = 0.2
    fusion_weight: float = 0.1
    init_prune_frames: int = 1

    # labels
    default_confidence: float = 0.8
    flood_kernel: int = 5
    flood_theta: float = 0.05
    movable_classes: list[int] = field(default_factory=lambda: list(DEFAULT_MOVABLE))
    class_table: str = ""

    # registration
    huber_delta: float = 0.1
    d_assoc: float = 0.5
    alpha_assoc_deg: float = 30.0
    max_iter: int = 50
    eps_converge: float = 1e-5
    max_halvings: int = 5
    cond_cap: float = 1e10

    seed: int = 42

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.width < 2 or self.height < 2:
            raise ConfigError(f"raster must be at least 2x2, got {self.height}x{self.width}")
        if not self.fov_up > self.fov_down:
            raise ConfigError("fov_up must exceed fov_down")
        for name in ("p_stable", "p_prior", "p_penalty", "default_confidence"):
            p = getattr(self, name)
            if not 0.0 < p < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {p}")
        for name in ("sigma_alpha", "sigma_d", "huber_delta", "flood_theta"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.flood_kernel < 1 or self.flood_kernel % 2 == 0:
            raise ConfigError("flood_kernel must be odd and >= 1")
        if 0 in self.movable_classes:
            raise ConfigError("class 0 (unlabeled) cannot be movable")
        if not 0.0 < self.fusion_weight <= 1.0:
            raise ConfigError("fusion_weight must lie in (0, 1]")

    # derived quantities
    @property
    def fov_up_rad(self) -> float:
        return math.radians(self.fov_up)

    @property
    def fov_down_rad(self) -> float:
        return math.radians(self.fov_down)

    @property
    def movable(self) -> frozenset[int]:
        return frozenset(int(c) for c in self.movable_classes)

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{k: _coerce(known[k], v) for k, v in data.items()})


def _coerce(f: dataclasses.Field, value: Any) -> Any:
    default = f.default_factory() if f.default is dataclasses.MISSING else f.default  # type: ignore[misc]
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        return [int(v) for v in value]
    if isinstance(default, bool):
        return bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return "" if value is None else str(value)


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a key/value mapping")
        data.update(loaded)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
