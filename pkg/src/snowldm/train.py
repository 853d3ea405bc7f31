"""Training loops: autoencoder first, then the conditioned denoiser on its
frozen quantized latents."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .diffusion import DiffusionSchedule, GuidanceConfig, train_step_ldm
from .nets import ADVERSE, CLEAR, Autoencoder, Denoiser, DenoiserConfig, EncoderConfig
from .quantize import commit_loss, quantize_loss
from .range_codec import read_rimg
from .synthdata import read_manifest
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 8
    lr: float = 1e-3
    momentum: float = 0.9
    quantizer: str = "lq"
    codebook_size: int = 16
    seed: int = 0
    clip: float | None = 1.0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.quantizer not in ("vq", "lq"):
            raise ValueError(f"quantizer must be 'vq' or 'lq', got {self.quantizer!r}")


class SGD:
    """Heavy-ball momentum on a name -> array parameter map."""

    def __init__(self, lr: float, momentum: float = 0.9, clip: float | None = None):
        self.lr, self.momentum, self.clip = lr, momentum, clip
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        scale = 1.0
        if self.clip is not None:
            norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
            if norm > self.clip:
                scale = self.clip / norm
        out = {}
        for name, p in params.items():
            g = grads[name] * np.float32(scale)
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v.astype(np.float32)
            out[name] = (p - self.lr * v).astype(np.float32)
        return out


def load_pairs(root: str | Path) -> tuple[np.ndarray, np.ndarray, float]:
    """Stacked (N, H, W) clear and snow images from a dataset directory."""
    clear, snow, r_max = [], [], None
    for row in read_manifest(root):
        a, b = read_rimg(row[0]), read_rimg(row[1])
        clear.append(a.depth)
        snow.append(b.depth)
        r_max = a.r_max
    return np.stack(clear), np.stack(snow), float(r_max)


def mixed_batch(clear: np.ndarray, snow: np.ndarray, batch: int, rng: np.random.Generator):
    """Alternating clear/snow rows drawn from random scenes; labels 0/1."""
    ids = rng.integers(0, clear.shape[0], size=batch)
    labels = np.arange(batch) % 2
    imgs = np.where(labels[:, None, None] == CLEAR, clear[ids], snow[ids])
    return imgs.astype(np.float32), labels


def autoencoder_loss(ae: Autoencoder, x: Tensor):
    """(total, rec, quantize, commit) tensors with unit weights."""
    x_hat, z, q = ae.reconstruct(x)
    rec = T.l1_loss(x_hat, x)
    ql = quantize_loss(z, q.raw)
    cl = commit_loss(z, q.raw)
    return T.add(T.add(rec, ql), cl), rec, ql, cl


def train_autoencoder(clear: np.ndarray, snow: np.ndarray, enc: EncoderConfig, cfg: TrainConfig,
                      log_path: str | Path | None = None) -> tuple[Autoencoder, list[tuple]]:
    rng = np.random.default_rng(cfg.seed)
    ae = Autoencoder(enc, cfg.quantizer, cfg.codebook_size, seed=cfg.seed)
    opt = SGD(cfg.lr, cfg.momentum, cfg.clip)
    rows: list[tuple] = []
    for step in range(1, cfg.steps + 1):
        imgs, _ = mixed_batch(clear, snow, cfg.batch, rng)
        params = ae.parameters()
        try:
            with T.Tape() as tape:
                total, rec, ql, cl = autoencoder_loss(ae, Tensor(imgs))
                grads = tape.backward(total, wrt=list(params.values()))
        except NumericError as exc:
            raise TrainingDiverged(f"autoencoder diverged at step {step}: {exc}") from exc
        rows.append((step, rec.item(), ql.item(), cl.item(), total.item()))
        new = opt.step({k: v.data for k, v in params.items()}, {k: grads[v.id].data for k, v in params.items()})
        if not all(np.all(np.isfinite(v)) for v in new.values()):
            raise TrainingDiverged(f"autoencoder parameters became non-finite at step {step}")
        ae.set_parameters(new)
        if step % 100 == 0:
            log.info("ae step %d rec %.4f quant %.4f commit %.4f", *rows[-1][:4])
    if log_path is not None:
        write_log(log_path, ("step", "L_rec", "L_quantize", "L_commit", "L_total"), rows)
    return ae, rows


def encode_latents(ae: Autoencoder, imgs: np.ndarray, batch: int = 32) -> np.ndarray:
    """Straight-through-quantized latents (N, h, w, n_z), no gradients recorded."""
    out = []
    for s in range(0, imgs.shape[0], batch):
        z = ae.encode(Tensor(imgs[s:s + batch]))
        out.append(ae.quantize(z).z_q.data)
    return np.concatenate(out)


def train_ldm(ae: Autoencoder, clear: np.ndarray, snow: np.ndarray, cfg: TrainConfig,
              guid: GuidanceConfig | None = None, sched: DiffusionSchedule | None = None,
              channels: tuple[int, int] = (32, 48), log_path: str | Path | None = None):
    """Fit a FiLM denoiser to latents of both weather conditions; ``ae`` stays frozen."""
    guid = guid or GuidanceConfig()
    sched = sched or DiffusionSchedule.linear(100)
    z_clear = encode_latents(ae, clear)
    z_snow = encode_latents(ae, snow)
    model = Denoiser(DenoiserConfig(n_z=ae.cfg.n_z, channels=channels, T=sched.T), seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(cfg.lr, cfg.momentum, cfg.clip)
    rows = []
    for step in range(1, cfg.steps + 1):
        ids = rng.integers(0, z_clear.shape[0], size=cfg.batch)
        labels = np.arange(cfg.batch) % 2
        z0 = np.where(labels[:, None, None, None] == ADVERSE, z_snow[ids], z_clear[ids])
        try:
            loss, grads = train_step_ldm(model, z0, labels, sched, guid, rng)
        except NumericError as exc:
            raise TrainingDiverged(f"denoiser diverged at step {step}: {exc}") from exc
        rows.append((step, loss))
        model.set_parameters(opt.step(model.state_dict(), grads))
        if step % 100 == 0:
            log.info("ldm step %d loss %.4f", step, loss)
    if log_path is not None:
        write_log(log_path, ("step", "L_eps"), rows)
    return model, rows


def write_log(path: str | Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r[0]] + [f"{v:.8g}" for v in r[1:]])


def read_log(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])
