"""Run configuration: defaults, TOML overrides and command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .loss import LossWeights
from .mapper import MapConfig
from .render import SamplingConfig


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    seed: int = 0
    # map and networks
    voxel_size: float = 0.2
    embedding_dim: int = 16
    hidden: int = 64
    time_freqs: int = 1
    scene_time: bool = True
    # ray sampling
    tr: float = 0.1
    near: float = 0.1
    far: float = 4.0
    n_uniform: int = 8
    n_surface: int = 8
    # loss weights
    w_color: float = 1.0
    w_depth: float = 0.5
    w_space: float = 0.05
    w_sdf: float = 0.05
    w_zero: float = 10.0
    # tracking
    track_iterations: int = 30
    track_rays: int = 1024
    track_lr: float = 2e-3
    track_lr_end: float = 0.0  # > 0: geometric decay from track_lr to this value
    lambda_r: float = 2.0
    gate: bool = True
    track_static_only: bool = False
    static_pose_grad: bool = True
    # mapping
    map_iterations: int = 15
    map_rays: int = 512
    init_iterations: int = 200
    lr_embeddings: float = 1e-2
    lr_networks: float = 1e-2
    lr_pose: float = 1e-3
    dynamic_fraction: float = 0.5
    gap: int = 5
    n_targets: int = 4
    overlap_points: int = 512
    # data
    depth_scale: float = 1.0 / 5000.0
    downsample: bool = False
    # outputs
    preview_every: int = 0
    cells_per_voxel: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and isinstance(v, bool):
                raise ConfigError(f"{f.name}: expected a number, got {v!r}")
        positive = ("voxel_size", "embedding_dim", "hidden", "tr", "far", "track_rays", "map_rays", "gap",
                    "n_targets", "overlap_points", "depth_scale", "cells_per_voxel", "lambda_r")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0 <= self.near < self.far:
            raise ConfigError("need 0 <= near < far")
        if self.n_uniform + self.n_surface < 1:
            raise ConfigError("at least one sample per ray is required")
        if self.track_lr_end < 0:
            raise ConfigError("track_lr_end must be >= 0 (0 keeps the rate constant)")
        if not 0.0 <= self.dynamic_fraction <= 1.0:
            raise ConfigError("dynamic_fraction must lie in [0, 1]")
        self.weights()

    # views for the modules ------------------------------------------------

    def weights(self) -> LossWeights:
        return LossWeights(self.w_color, self.w_depth, self.w_space, self.w_sdf, self.w_zero)

    def sampling(self) -> SamplingConfig:
        return SamplingConfig(self.n_uniform, self.n_surface, self.tr, self.near, self.far)

    def mapping(self) -> MapConfig:
        return MapConfig(self.map_iterations, self.map_rays, self.lr_embeddings, self.lr_networks,
                         self.lr_pose, self.dynamic_fraction, self.static_pose_grad)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_toml(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, bool):
                lines.append(f"{k} = {'true' if v else 'false'}")
            else:
                lines.append(f"{k} = {v!r}")
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(Config)}


def _coerce(key: str, value):
    kind = _TYPES[key]
    if kind == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("1", "true", "yes", "on", "0", "false", "no", "off"):
            return value.lower() in ("1", "true", "yes", "on")
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(value, bool):
        raise ConfigError(f"{key}: expected {kind}, got {value!r}")
    try:
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind}, got {value!r}") from None


def merge(base: Config, overrides: dict) -> Config:
    unknown = sorted(set(overrides) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    values = base.to_dict()
    values.update({k: _coerce(k, v) for k, v in overrides.items()})
    return Config(**values)


def load_config(path=None, overrides: dict | None = None) -> Config:
    """Defaults, then the TOML file at ``path``, then ``overrides``."""
    cfg = Config()
    if path is not None:
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        cfg = merge(cfg, data)
    if overrides:
        cfg = merge(cfg, overrides)
    return cfg


def parse_assignments(items) -> dict:
    """``["tr=0.05", "gate=false"]`` -> ``{"tr": "0.05", "gate": "false"}``."""
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out
