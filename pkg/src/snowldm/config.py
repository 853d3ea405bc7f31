"""Plain-text ``key = value`` pipeline configuration.

Lines starting with ``#`` are comments.  Unknown keys are rejected, and
values are parsed to the type of the default and then validated by the
owning module's own dataclass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from .diffusion import DiffusionSchedule, GuidanceConfig
from .nets import DenoiserConfig, EncoderConfig
from .postprocess import PostprocessParams
from .range_codec import SensorConfig, default_beam_elevations
from .synthdata import SnowSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _channels(text: str) -> tuple[int, int]:
    parts = tuple(int(p) for p in text.replace(" ", "").split(","))
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated channel counts, got {text!r}")
    return parts


# key -> (attribute, parser); defaults are the toy-scale settings
_KEYS = {
    "sensor.H": ("sensor_H", int),
    "sensor.W": ("sensor_W", int),
    "sensor.r_max": ("sensor_r_max", float),
    "sensor.mode": ("sensor_mode", str),
    "sensor.phi_min": ("sensor_phi_min", float),
    "sensor.phi_max": ("sensor_phi_max", float),
    "ae.quantizer": ("ae_quantizer", str),
    "ae.codebook_size": ("ae_codebook_size", int),
    "ae.f_h": ("ae_f_h", int),
    "ae.f_w": ("ae_f_w", int),
    "ae.n_z": ("ae_n_z", int),
    "ae.base_channels": ("ae_base_channels", int),
    "ae.steps": ("ae_steps", int),
    "ae.batch": ("ae_batch", int),
    "ae.lr": ("ae_lr", float),
    "ae.momentum": ("ae_momentum", float),
    "ldm.steps": ("ldm_steps", int),
    "ldm.batch": ("ldm_batch", int),
    "ldm.lr": ("ldm_lr", float),
    "ldm.momentum": ("ldm_momentum", float),
    "ldm.channels": ("ldm_channels", _channels),
    "diffusion.T": ("diffusion_T", int),
    "diffusion.t_aug": ("diffusion_t_aug", int),
    "diffusion.w": ("diffusion_w", float),
    "diffusion.p_uncond": ("diffusion_p_uncond", float),
    "diffusion.requantize": ("diffusion_requantize", _bool),
    "postprocess.lambda": ("post_lambda", float),
    "postprocess.nu": ("post_nu", float),
    "snow.rate": ("snow_rate", float),
    "snow.near_bias": ("snow_near_bias", float),
    "min_range": ("min_range", float),
    "seed": ("seed", int),
}


@dataclass
class PipelineConfig:
    sensor_H: int = 32
    sensor_W: int = 64
    sensor_r_max: float = 40.0
    sensor_mode: str = "beam"
    sensor_phi_min: float = -25.0   # degrees, uniform mode only
    sensor_phi_max: float = 15.0
    ae_quantizer: str = "lq"
    ae_codebook_size: int = 16
    ae_f_h: int = 4
    ae_f_w: int = 8
    ae_n_z: int = 8
    ae_base_channels: int = 8
    ae_steps: int = 2000
    ae_batch: int = 8
    ae_lr: float = 0.1
    ae_momentum: float = 0.9
    ldm_steps: int = 2000
    ldm_batch: int = 16
    ldm_lr: float = 0.01
    ldm_momentum: float = 0.9
    ldm_channels: tuple[int, int] = field(default=(32, 48))
    diffusion_T: int = 100
    diffusion_t_aug: int = 50
    diffusion_w: float = 2.0
    diffusion_p_uncond: float = 0.1
    diffusion_requantize: bool = True
    post_lambda: float = 0.3
    post_nu: float = 0.02
    snow_rate: float = 0.08
    snow_near_bias: float = 0.25
    min_range: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    # ------------------------------------------------------------ parsing
    @classmethod
    def keys(cls) -> list[str]:
        return list(_KEYS)

    def set(self, key: str, value: str) -> None:
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        attr, parse = _KEYS[key]
        try:
            setattr(self, attr, parse(value.strip()))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc

    def update(self, pairs: dict[str, str]) -> "PipelineConfig":
        for k, v in pairs.items():
            self.set(k, v)
        self.validate()
        return self

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "PipelineConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                cfg.set(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from None
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "PipelineConfig":
        if path is None:
            return cls()
        return cls.parse(Path(path).read_text(), str(path))

    def dumps(self) -> str:
        lines = []
        for key, (attr, parse) in _KEYS.items():
            v = getattr(self, attr)
            if parse is _channels:
                v = ",".join(str(c) for c in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    def validate(self) -> None:
        """Build every owned object once so each module checks its own values."""
        try:
            self.sensor()
            self.encoder().stage_strides()
            self.ae_train()
            self.ldm_train()
            self.schedule()
            self.guidance()
            self.denoiser()
            self.postprocess()
            self.snow()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 <= self.diffusion_t_aug < self.diffusion_T:
            raise ConfigError(f"diffusion.t_aug must satisfy 0 <= t_aug < T={self.diffusion_T}")
        if self.sensor_H % self.ae_f_h or self.sensor_W % self.ae_f_w:
            raise ConfigError(f"sensor {self.sensor_H}x{self.sensor_W} not divisible by ae factors "
                              f"{self.ae_f_h}x{self.ae_f_w}")
        h, w = self.sensor_H // self.ae_f_h, self.sensor_W // self.ae_f_w
        if h % 4 or w % 4:
            raise ConfigError(f"latent grid {h}x{w} must be divisible by 4 for the denoiser")
        if self.min_range < 0:
            raise ConfigError("min_range must be >= 0")

    # ------------------------------------------------------------ owned objects
    def sensor(self) -> SensorConfig:
        if self.sensor_mode == "beam":
            return SensorConfig(H=self.sensor_H, W=self.sensor_W, r_max=self.sensor_r_max, mode="beam",
                                beam_elevations=default_beam_elevations(self.sensor_H))
        return SensorConfig(H=self.sensor_H, W=self.sensor_W, r_max=self.sensor_r_max, mode=self.sensor_mode,
                            phi_min=math.radians(self.sensor_phi_min), phi_max=math.radians(self.sensor_phi_max))

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.ae_f_h, self.ae_f_w, self.ae_n_z, self.ae_base_channels)

    def ae_train(self) -> TrainConfig:
        return TrainConfig(steps=self.ae_steps, batch=self.ae_batch, lr=self.ae_lr, momentum=self.ae_momentum,
                           quantizer=self.ae_quantizer, codebook_size=self.ae_codebook_size,
                           seed=self.seed, clip=None)

    def ldm_train(self) -> TrainConfig:
        return TrainConfig(steps=self.ldm_steps, batch=self.ldm_batch, lr=self.ldm_lr,
                           momentum=self.ldm_momentum, seed=self.seed, clip=None)

    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule.linear(self.diffusion_T)

    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(w=self.diffusion_w, p_uncond=self.diffusion_p_uncond)

    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(n_z=self.ae_n_z, channels=self.ldm_channels, T=self.diffusion_T)

    def postprocess(self) -> PostprocessParams:
        return PostprocessParams(lam=self.post_lambda, nu=self.post_nu)

    def snow(self) -> SnowSpec:
        return SnowSpec(rate=self.snow_rate, near_bias=self.snow_near_bias)

