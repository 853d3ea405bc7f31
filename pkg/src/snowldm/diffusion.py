"""DDPM schedule, noise-prediction training step, classifier-free guided
sampling and partial diffusion for scene editing.

Steps are 1-based (t = 1..T); schedule arrays are indexed at t - 1 and the
denoiser receives the physical index t - 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .nets import ADVERSE, NULL_LABEL, Denoiser
from .tensor import Tensor


@dataclass
class DiffusionSchedule:
    T: int
    betas: np.ndarray

    def __post_init__(self) -> None:
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.shape != (self.T,):
            raise ValueError(f"need {self.T} betas, got {self.betas.shape}")
        if not (np.all(self.betas > 0) and np.all(self.betas < 1)):
            raise ValueError("betas must lie in (0, 1)")
        if self.T > 1 and not np.all(np.diff(self.betas) > 0):
            raise ValueError("betas must be strictly increasing")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @classmethod
    def linear(cls, T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> "DiffusionSchedule":
        """Linear betas; endpoints are given for 1000 steps and rescaled by 1000 / T."""
        scale = 1000.0 / T
        if beta_end * scale >= 1:
            raise ValueError(f"T={T} is too short: the rescaled final beta {beta_end * scale:g} must stay below 1")
        return cls(T, np.linspace(beta_start * scale, beta_end * scale, T))

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")

    def alpha_bar(self, t):
        return self.alpha_bars[np.asarray(t) - 1]


@dataclass
class GuidanceConfig:
    w: float = 2.0
    p_uncond: float = 0.1

    def __post_init__(self) -> None:
        if self.w < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.w}")
        if not 0 <= self.p_uncond <= 1:
            raise ValueError(f"p_uncond must be in [0, 1], got {self.p_uncond}")


def _bshape(a: np.ndarray, like: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape + (1,) * (like.ndim - a.ndim))


def q_sample(z0: np.ndarray, t, noise: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """sqrt(abar_t) z0 + sqrt(1 - abar_t) noise; ``t`` scalar or one per batch row."""
    t_arr = np.asarray(t)
    if t_arr.min() < 1 or t_arr.max() > sched.T:
        raise ValueError(f"step outside [1, {sched.T}]")
    z0 = np.asarray(z0)
    ab = sched.alpha_bar(t_arr)
    if np.ndim(ab):
        ab = _bshape(ab, z0)
    out = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise
    return out.astype(z0.dtype if z0.dtype.kind == "f" else np.float32)


def train_step_ldm(model: Denoiser, z0: np.ndarray, b: np.ndarray, sched: DiffusionSchedule,
                   guid: GuidanceConfig, rng: np.random.Generator):
    """One epsilon-prediction loss with condition dropout; returns (loss, grads by name)."""
    n = z0.shape[0]
    t = rng.integers(1, sched.T + 1, size=n)
    noise = rng.standard_normal(z0.shape).astype(np.float32)
    labels = np.where(rng.random(n) < guid.p_uncond, NULL_LABEL, np.asarray(b, dtype=np.int64))
    z_t = q_sample(z0, t, noise, sched)
    params = model.parameters()
    with T.Tape() as tape:
        eps = model(Tensor(z_t), t - 1, labels)
        loss = T.mse_loss(eps, Tensor(noise))
        grads = tape.backward(loss, wrt=list(params.values()))
    return loss.item(), {k: grads[v.id].data for k, v in params.items()}


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    return (1.0 + w) * eps_cond - w * eps_uncond


def guided_eps(model: Denoiser, z_t: np.ndarray, t: int, b: int, w: float) -> np.ndarray:
    """Classifier-free guided noise estimate at 1-based step ``t``."""
    if b not in (0, 1):
        raise ValueError(f"guided sampling needs label 0 or 1, got {b}")
    n = z_t.shape[0]
    eps_c = model(Tensor(z_t), np.full(n, t - 1), np.full(n, b)).data
    if w == 0:
        return eps_c
    eps_u = model(Tensor(z_t), np.full(n, t - 1), np.full(n, NULL_LABEL)).data
    return cfg_combine(eps_c, eps_u, w)


def p_sample_step(model: Denoiser, z_t: np.ndarray, t: int, b: int, w: float,
                  sched: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """Ancestral DDPM step t -> t-1 with posterior variance; no noise at t = 1."""
    sched.check_step(t)
    eps = guided_eps(model, z_t, t, b, w)
    beta, alpha, ab = sched.betas[t - 1], sched.alphas[t - 1], sched.alpha_bars[t - 1]
    mean = (z_t - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(alpha)
    if t == 1:
        return mean.astype(np.float32)
    var = beta * (1.0 - sched.alpha_bars[t - 2]) / (1.0 - ab)
    return (mean + np.sqrt(var) * rng.standard_normal(z_t.shape)).astype(np.float32)


Progress = Callable[[int, int], None]


def sample(model: Denoiser, shape, b: int, w: float, sched: DiffusionSchedule,
           rng: np.random.Generator, progress: Progress | None = None) -> np.ndarray:
    """Full T-step chain from pure noise."""
    z = rng.standard_normal(shape).astype(np.float32)
    for t in range(sched.T, 0, -1):
        z = p_sample_step(model, z, t, b, w, sched, rng)
        if progress and (sched.T - t + 1) % 10 == 0:
            progress(sched.T - t + 1, sched.T)
    return z


def partial_augment(model: Denoiser, z_clear: np.ndarray, t_aug: int, sched: DiffusionSchedule,
                    rng: np.random.Generator, b: int = ADVERSE, w: float = 2.0,
                    progress: Progress | None = None) -> np.ndarray:
    """Noise a clear latent to step ``t_aug`` then denoise it back under label ``b``."""
    if not 0 <= t_aug < sched.T:
        raise ValueError(f"t_aug must satisfy 0 <= t_aug < T={sched.T}, got {t_aug}")
    z_clear = np.asarray(z_clear, dtype=np.float32)
    if t_aug == 0:
        return z_clear.copy()
    z = q_sample(z_clear, t_aug, rng.standard_normal(z_clear.shape), sched)
    for t in range(t_aug, 0, -1):
        z = p_sample_step(model, z, t, b, w, sched, rng)
        done = t_aug - t + 1
        if progress and done % 10 == 0:
            progress(done, t_aug)
    return z
