"""Run configuration: nested dataclasses parsed strictly from JSON.

Unknown keys anywhere in the tree fail with their dotted path, so a typo
never silently falls back to a default.
"""

from __future__ import annotations

import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from diffcd.denoiser import UNetConfig
from diffcd.diffusion import make_linear_schedule
from diffcd.errors import ConfigError, LoadError
from diffcd.fdaf import HIDDEN, MODES
from diffcd.pipeline import CDConfig
from diffcd.synthdata import SceneConfig


@dataclass
class ScheduleSection:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.05


@dataclass
class UNetSection:
    in_channels: int = 1
    base_channels: int = 8
    depth: int = 2
    time_embed_dim: int = 16
    tap_layers: list[int] | None = None
    norm_groups: int = 4


@dataclass
class FdafSection:
    mode: str = "dual"
    max_flow: float = 8.0
    hidden: int = HIDDEN


@dataclass
class CDSection:
    timesteps: list[int] = field(default_factory=lambda: [5, 50])
    head_channels: int = 16
    tau: float = 0.5
    pos_weight: float = 1.0
    epochs: int = 20
    batch: int = 16
    lr: float = 5e-3
    flow_lr_scale: float = 0.1
    flow_warmup: int = 5
    backbone_lr_scale: float = 0.1


@dataclass
class TrainSection:
    lr: float = 2e-3
    batch: int = 16
    steps: int = 300
    seed: int = 0


@dataclass
class DataSection:
    train: str | None = None
    val: str | None = None
    test: str | None = None
    scene: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    unet: UNetSection = field(default_factory=UNetSection)
    fdaf: FdafSection = field(default_factory=FdafSection)
    cd: CDSection = field(default_factory=CDSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)

    def to_dict(self) -> dict:
        return asdict(self)

    # typed views -----------------------------------------------------------
    def schedule_obj(self):
        s = self.schedule
        return make_linear_schedule(s.T, s.beta_start, s.beta_end)

    def unet_obj(self) -> UNetConfig:
        u = asdict(self.unet)
        if u["tap_layers"] is not None:
            u["tap_layers"] = tuple(u["tap_layers"])
        return UNetConfig(**u)

    def scene_obj(self, seed: int | None = None) -> SceneConfig:
        d = dict(self.data.scene)
        if seed is not None:
            d["seed"] = seed
        return SceneConfig.from_dict(d)

    def cd_obj(self) -> CDConfig:
        c = self.cd
        return CDConfig(mode=self.fdaf.mode, max_flow=self.fdaf.max_flow, flow_hidden=self.fdaf.hidden,
                        head_channels=c.head_channels, tau=c.tau, pos_weight=c.pos_weight,
                        epochs=c.epochs, batch=c.batch, lr=c.lr, flow_lr_scale=c.flow_lr_scale,
                        flow_warmup=c.flow_warmup,
                        seed=self.train.seed)

    def validate(self) -> "RunConfig":
        """Build every typed view once so invalid values fail early."""
        sched = self.schedule_obj()
        self.unet_obj()
        self.scene_obj().check_depth(self.unet.depth)
        if self.fdaf.mode not in MODES:
            raise ConfigError(f"fdaf.mode must be one of {MODES}, got {self.fdaf.mode!r}")
        self.cd_obj()
        bad = [k for k in self.cd.timesteps if not 1 <= k <= sched.T]
        if not self.cd.timesteps or bad:
            raise ConfigError(f"cd.timesteps must be non-empty and within 1..{sched.T}, got {self.cd.timesteps}")
        for name in ("lr", "batch"):
            if getattr(self.train, name) <= 0 or getattr(self.cd, name) <= 0:
                raise ConfigError(f"train.{name} and cd.{name} must be positive")
        if self.train.steps < 0 or self.cd.epochs < 0:
            raise ConfigError("train.steps and cd.epochs must be non-negative")
        if not 0 <= self.train.seed < 2 ** 64:
            raise ConfigError("train.seed must be an unsigned 64-bit integer")
        return self


def _check_type(value, hint, path: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        options = typing.get_args(hint)
        if value is None and type(None) in options:
            return value
        return _check_type(value, next(a for a in options if a is not type(None)), path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        (inner,) = typing.get_args(hint)
        return [_check_type(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    if hint is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is str and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key {path + key!r}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{path}{name}.")
        else:
            kwargs[name] = _check_type(value, hint, path + name)
    return cls(**kwargs)


def parse_config(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    if cfg.data.scene:
        # scene keys are checked against SceneConfig so typos report their path too
        unknown = sorted(set(cfg.data.scene) - {f.name for f in fields(SceneConfig)})
        if unknown:
            raise ConfigError(f"unknown config key 'data.scene.{unknown[0]}'")
    return cfg.validate()


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise LoadError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(data)
