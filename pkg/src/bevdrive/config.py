"""Run configuration: nested sections, strict YAML loading, canonical hashing.

Unknown keys are rejected with their dotted path; every run directory gets a
fully resolved copy of the config it ran with, and the sha256 of the
canonical dump ties checkpoints to their configuration.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .bev import BevConfig
from .errors import ConfigError
from .policy import PpoConfig
from .simworld import RewardParams, SimParams

# agent roster: name -> (rig kind, image extractor)
AGENTS = {
    "baseline3": ("front3x60", "baseline"),
    "baselinepan": ("surround3x120", "baseline"),
    "bev3": ("surround3x120", "bev"),
    "bev6": ("surround6x60", "bev"),
}


@dataclass
class RewardSection:
    collision_penalty: float = 100.0
    speed_limit: float = 8.0
    waypoint_reach_radius: float = 2.0
    denom_floor: float = 0.25

    def reward_params(self) -> RewardParams:
        return RewardParams(**dataclasses.asdict(self))


@dataclass
class SimSection:
    map_id: int = 3
    congestion: str = "low"
    dt: float = 0.1
    image_width: int = 176
    image_height: int = 64
    rig_kind: str = "surround6x60"
    camera_height: float = 1.6
    camera_pitch_deg: float = 10.0
    render_images: bool = True
    vehicles_low: int = 8
    pedestrians_low: int = 8
    wheelbase: float = 2.7
    max_accel: float = 3.0
    max_brake: float = 6.0
    max_steer_deg: float = 35.0
    reward: RewardSection = field(default_factory=RewardSection)

    def sim_params(self, rig_kind: str | None = None) -> SimParams:
        return SimParams(
            dt=self.dt, image_width=self.image_width, image_height=self.image_height,
            rig_kind=rig_kind or self.rig_kind, camera_height=self.camera_height,
            camera_pitch_deg=self.camera_pitch_deg, render_images=self.render_images,
            vehicles_low=self.vehicles_low, pedestrians_low=self.pedestrians_low,
            wheelbase=self.wheelbase, max_accel=self.max_accel, max_brake=self.max_brake,
            max_steer_deg=self.max_steer_deg, reward=self.reward.reward_params())


@dataclass
class BevSection:
    num_depth_bins: int = 16
    depth_near: float = 1.0
    depth_far: float = 33.0
    x_extent: float = 40.0
    y_extent: float = 40.0
    cell_size: float = 0.5
    context_channels: int = 32
    latent_dim: int = 128

    def bev_config(self) -> BevConfig:
        return BevConfig(**dataclasses.asdict(self))


@dataclass
class PpoSection:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatches: int = 8
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    horizon: int = 128
    total_steps: int = 100_000
    learning_rate: float = 3e-4
    seq_chunk: int = 16
    kl_limit: float = 0.5
    checkpoint_every: int = 25

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(**dataclasses.asdict(self))


@dataclass
class SegSection:
    frames: int = 400
    epochs: int = 12
    learning_rate: float = 3e-3
    batch_size: int = 16
    val_fraction: float = 0.2
    frame_stride: int = 4


@dataclass
class EvalSection:
    episodes: int = 50
    seed_base: int = 1000
    maps: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 6, 7])
    congestion: list = field(default_factory=lambda: ["low", "high"])


@dataclass
class RunSection:
    seed: int = 0
    workers: int = 1
    output_dir: str = "runs"


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    sim: SimSection = field(default_factory=SimSection)
    bev: BevSection = field(default_factory=BevSection)
    ppo: PpoSection = field(default_factory=PpoSection)
    seg: SegSection = field(default_factory=SegSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self):
        """Construct every derived object so invariants fire eagerly."""
        self.sim.sim_params()
        self.bev.bev_config().grid_spec()
        self.bev.bev_config().depth_bins()
        self.ppo.ppo_config()
        for congestion in self.eval.congestion:
            if congestion not in ("low", "high"):
                raise ConfigError(f"eval.congestion entries must be low/high, got {congestion!r}")
        for m in self.eval.maps:
            if not 1 <= int(m) <= 7:
                raise ConfigError(f"eval.maps entries must be in 1..7, got {m}")
        if self.sim.congestion not in ("low", "high"):
            raise ConfigError(f"sim.congestion must be low/high, got {self.sim.congestion!r}")
        return self


_SCALARS = (int, float, str, bool)


def _build_section(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path or '<root>'} must be a mapping")
    field_map = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(field_map)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown config key: {path + key}")
    kwargs = {}
    for name, f in field_map.items():
        if name not in data:
            continue
        value = data[name]
        ftype = f.type if isinstance(f.type, type) else None
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default) or (ftype and dataclasses.is_dataclass(ftype)):
            section_cls = type(default) if dataclasses.is_dataclass(default) else ftype
            kwargs[name] = _build_section(section_cls, value or {}, f"{path}{name}.")
        elif isinstance(default, list):
            if not isinstance(value, list):
                raise ConfigError(f"config key {path + name} must be a list")
            kwargs[name] = list(value)
        else:
            kwargs[name] = _coerce(value, default, path + name)
    return cls(**kwargs)


def _coerce(value, default, path: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {path} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {path} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {path} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {path} must be a string")
        return value
    raise ConfigError(f"config key {path} has unsupported type")


def default_config() -> RunConfig:
    return RunConfig()


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return _build_section(RunConfig, data, "").validate()


def config_from_dict(data: dict) -> RunConfig:
    return _build_section(RunConfig, data, "").validate()


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def canonical_dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)


def save_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        fh.write(canonical_dump(cfg))


def config_hash(cfg: RunConfig) -> bytes:
    return hashlib.sha256(canonical_dump(cfg).encode()).digest()
