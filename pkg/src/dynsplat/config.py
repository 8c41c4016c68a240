"""Training configuration and its JSON form."""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field, fields

from .antialias import ConfigError, FilterConfig
from .checkpoint import config_hash
from .raster import RasterConfig

# keys whose values change the model's structure or render path
MODEL_KEYS = ("decoder", "hidden", "resolution", "time_resolution", "multipliers", "heads",
              "mlp_ratio", "chunk", "sh_head", "sh_degree", "s3d", "s2d", "enable3d", "enable2d",
              "support_alpha")


def _default_lr_mult():
    # keys are parameter names or prefixes ("dec" covers every decoder weight)
    return {"positions": 0.1, "dec": 0.1}


@dataclass
class TrainConfig:
    lambda_color: float = 1.0
    lambda_depth: float = 0.1
    lambda_spatial: float = 1e-4
    lambda_temporal: float = 1e-3
    lr: float = 1.6e-3
    lr_mult: dict = field(default_factory=_default_lr_mult)
    lr_final_factor: float = 1.0  # exponential decay target at total_iters; 1 disables
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    warmup_iters: int = 1000
    total_iters: int = 4000
    densify_interval: int = 500
    densify_start: int = 500
    densify_stop: int = 3000
    densify_grad_threshold: float = 0.02
    opacity_min: float = 0.005
    scale_split_fraction: float = 0.01  # of the scene extent
    max_gaussians: int = 6000
    seed: int = 0
    # anti-aliasing
    s3d: float = 0.01
    s2d: float = 0.1
    enable3d: bool = True
    enable2d: bool = True
    # deformation network
    decoder: str = "sad"
    hidden: int = 32
    resolution: int = 64
    time_resolution: int = 24
    multipliers: tuple = (1,)
    heads: int = 2
    mlp_ratio: int = 2
    gamma_init: float = 1e-4
    chunk: int = 256
    sh_head: bool = True
    # initialization
    sh_degree: int = 2
    init_fraction: float = 0.12
    init_stride: int = 2
    init_opacity: float = 0.1
    # rasterizer footprint cutoff used for training and for renders of the trained model
    support_alpha: float = 1e-4
    # execution
    workers: int = 1
    log_wall_time: bool = False

    def __post_init__(self):
        self.multipliers = tuple(self.multipliers)
        self.lr_mult = dict(self.lr_mult)
        self.validate()

    def validate(self):
        for k in ("lambda_color", "lambda_depth", "lambda_spatial", "lambda_temporal"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0, got {getattr(self, k)}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.total_iters < 0 or self.warmup_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.total_iters > 0 and self.warmup_iters >= self.total_iters:
            raise ConfigError(f"warmup_iters ({self.warmup_iters}) must be < total_iters ({self.total_iters})")
        if self.decoder not in ("sad", "mlp", "none"):
            raise ConfigError(f"decoder must be 'sad', 'mlp' or 'none', got {self.decoder!r}")
        if self.densify_interval <= 0:
            raise ConfigError("densify_interval must be positive")
        for k in ("opacity_min", "scale_split_fraction"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive, got {getattr(self, k)}")
        if not 0 < self.init_fraction <= 1:
            raise ConfigError(f"init_fraction must be in (0, 1], got {self.init_fraction}")
        if not 0 < self.support_alpha < 1:
            raise ConfigError(f"support_alpha must be in (0, 1), got {self.support_alpha}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not 0 <= self.sh_degree <= 3:
            raise ConfigError(f"sh_degree must be 0..3, got {self.sh_degree}")
        self.filters()  # raises on negative filter sizes

    def filters(self) -> FilterConfig:
        return FilterConfig(self.s3d, self.s2d, self.enable3d, self.enable2d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["multipliers"] = list(self.multipliers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ConfigError(f"unknown config keys: {bad}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json(cls, text: str, source="<config>") -> "TrainConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{source}: line {e.lineno} column {e.colno}: {e.msg}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"{source}: top level must be an object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            return cls.from_json(fh.read(), str(path))

    def replace(self, **kw) -> "TrainConfig":
        d = self.to_dict()
        d.update(kw)
        return TrainConfig.from_dict(d)

    def raster(self) -> RasterConfig:
        return RasterConfig(support_alpha=self.support_alpha, workers=self.workers)

    def model_config(self) -> dict:
        d = self.to_dict()
        return {k: d[k] for k in MODEL_KEYS}

    def hash(self) -> str:
        return config_hash(self.model_config())


def config_diff(a: TrainConfig, b: TrainConfig) -> dict:
    """Keys whose values differ, mapped to ``(a_value, b_value)``."""
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}
