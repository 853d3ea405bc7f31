"""Toy convolutional autoencoder and FiLM-conditioned U-net denoiser.

Images are (N, H, W) tensors of normalized depth; latent grids are
channel-last (N, h, w, n_z).  Internally every conv runs NCHW.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .quantize import LqCodebooks, Quantized, VqCodebook, make_quantizer
from .tensor import ShapeError, Tensor

CLEAR, ADVERSE, NULL_LABEL = 0, 1, 2


def _log2_exact(f: int, what: str) -> int:
    k = int(round(math.log2(f))) if f >= 1 else -1
    if k < 0 or 2 ** k != f:
        raise ValueError(f"{what} must be a power of two, got {f}")
    return k


def _conv_init(rng, c_out, c_in, kh, kw) -> np.ndarray:
    std = math.sqrt(2.0 / (c_in * kh * kw))
    return rng.normal(0.0, std, size=(c_out, c_in, kh, kw)).astype(np.float32)


class _Module:
    """Holds a flat name -> Tensor parameter dict."""

    params: dict[str, Tensor]

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def set_parameters(self, arrays) -> None:
        for name, arr in arrays.items():
            if name in self.params:
                old = self.params[name]
                if tuple(np.shape(arr)) != old.shape:
                    raise ShapeError(f"parameter {name}: expected dims {old.dims}, got {list(np.shape(arr))}")
                self.params[name] = Tensor(arr, requires_grad=True, name=name)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def _conv(self, x, name, stride=(1, 1), padding=(1, 1)):
        return T.conv2d(x, self.params[name + ".w"], self.params[name + ".b"], stride, padding)

    def _convt(self, x, name, stride, padding=(1, 1)):
        return T.conv2d_transpose(x, self.params[name + ".w"], self.params[name + ".b"], stride, padding)


# ---------------------------------------------------------------- autoencoder

@dataclass
class EncoderConfig:
    f_h: int = 4
    f_w: int = 8
    n_z: int = 16
    base_channels: int = 16

    def stage_strides(self) -> list[tuple[int, int]]:
        kh = _log2_exact(self.f_h, "f_h")
        kw = _log2_exact(self.f_w, "f_w")
        return [(2 if s < kh else 1, 2 if s < kw else 1) for s in range(max(kh, kw))]

    def stage_channels(self) -> list[int]:
        c = self.base_channels
        return [c] + [c * 2] * len(self.stage_strides())


class Autoencoder(_Module):
    """Encoder -> quantizer -> decoder with a tanh-bounded output."""

    def __init__(self, cfg: EncoderConfig, quantizer: str = "lq", codebook_size: int = 16,
                 seed: int = 0):
        self.cfg = cfg
        self.codebook_size = codebook_size
        rng = np.random.default_rng(seed)
        chans = cfg.stage_channels()
        strides = cfg.stage_strides()
        p: dict[str, np.ndarray] = {}

        def conv(name, c_out, c_in, kh, kw):
            p[name + ".w"] = _conv_init(rng, c_out, c_in, kh, kw)
            p[name + ".b"] = np.zeros(c_out, dtype=np.float32)

        conv("ae.enc.in", chans[0], 1, 3, 3)
        for s in range(len(strides)):
            conv(f"ae.enc.down{s}", chans[s + 1], chans[s], 3, 3)
            conv(f"ae.enc.mix{s}", chans[s + 1], chans[s + 1], 3, 3)
        conv("ae.enc.out", cfg.n_z, chans[-1], 1, 1)
        p["ae.enc.out.w"] *= 0.5
        conv("ae.dec.in", chans[-1], cfg.n_z, 3, 3)
        for s in reversed(range(len(strides))):
            sh, sw = strides[s]
            # stride-2 transposed kernels of 4 double the size; stride-1 kernels of 3 keep it
            kernel = _conv_init(rng, chans[s], chans[s + 1], 4 if sh == 2 else 3, 4 if sw == 2 else 3)
            p[f"ae.dec.up{s}.w"] = np.ascontiguousarray(kernel.transpose(1, 0, 2, 3))
            p[f"ae.dec.up{s}.b"] = np.zeros(chans[s], dtype=np.float32)
            conv(f"ae.dec.mix{s}", chans[s], chans[s], 3, 3)
        conv("ae.dec.out", 1, chans[0], 3, 3)
        p["ae.dec.out.w"] *= 0.1
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}
        self.quantizer: VqCodebook | LqCodebooks = make_quantizer(quantizer, cfg.n_z, codebook_size, rng)

    @property
    def kind(self) -> str:
        return self.quantizer.kind

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        out.update(self.quantizer.parameters())
        return out

    def set_parameters(self, arrays) -> None:
        super().set_parameters({k: v for k, v in arrays.items() if k.startswith("ae.")})
        q = {k: v for k, v in arrays.items() if not k.startswith("ae.")}
        if not q:
            return
        if self.kind == "vq":
            self.quantizer = VqCodebook(q["vq.codebook"])
        else:
            self.quantizer = LqCodebooks(np.stack([q[f"lq.codebook.{n}"] for n in range(self.cfg.n_z)]))

    def latent_shape(self, H: int, W: int) -> tuple[int, int, int]:
        if H % self.cfg.f_h or W % self.cfg.f_w:
            raise ShapeError(f"image {H}x{W} not divisible by factors {self.cfg.f_h}x{self.cfg.f_w}")
        return H // self.cfg.f_h, W // self.cfg.f_w, self.cfg.n_z

    def encode(self, x: Tensor) -> Tensor:
        """(N, H, W) -> continuous latent (N, h, w, n_z)."""
        if x.data.ndim != 3:
            raise ShapeError(f"encode expects (N, H, W), got {x.dims}")
        n, H, W = x.shape
        self.latent_shape(H, W)
        h = T.silu(self._conv(T.reshape(x, (n, 1, H, W)), "ae.enc.in"))
        for s, stride in enumerate(self.cfg.stage_strides()):
            h = T.silu(self._conv(h, f"ae.enc.down{s}", stride))
            h = T.silu(self._conv(h, f"ae.enc.mix{s}"))
        z = self._conv(h, "ae.enc.out", padding=(0, 0))
        return T.transpose(z, (0, 2, 3, 1))

    def quantize(self, z: Tensor) -> Quantized:
        return self.quantizer(z)

    def decode(self, z_q: Tensor) -> Tensor:
        """(N, h, w, n_z) -> (N, H, W) in (-1, 1)."""
        if z_q.data.ndim != 4 or z_q.shape[-1] != self.cfg.n_z:
            raise ShapeError(f"decode expects (N, h, w, {self.cfg.n_z}), got {z_q.dims}")
        h = T.silu(self._conv(T.transpose(z_q, (0, 3, 1, 2)), "ae.dec.in"))
        for s in reversed(range(len(self.cfg.stage_strides()))):
            h = T.silu(self._convt(h, f"ae.dec.up{s}", self.cfg.stage_strides()[s]))
            h = T.silu(self._conv(h, f"ae.dec.mix{s}"))
        out = T.tanh(self._conv(h, "ae.dec.out"))
        n, _, H, W = out.shape
        return T.reshape(out, (n, H, W))

    def reconstruct(self, x: Tensor) -> tuple[Tensor, Tensor, Quantized]:
        z = self.encode(x)
        q = self.quantize(z)
        return self.decode(q.z_q), z, q

    def config_vector(self) -> np.ndarray:
        c = self.cfg
        return np.array([c.f_h, c.f_w, c.n_z, c.base_channels, 0 if self.kind == "vq" else 1,
                         self.codebook_size], dtype=np.float32)

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "Autoencoder":
        if "ae.config" not in state:
            raise ShapeError("checkpoint has no autoencoder (missing ae.config)")
        f_h, f_w, n_z, base, kind, size = (int(v) for v in state["ae.config"])
        model = cls(EncoderConfig(f_h, f_w, n_z, base), "vq" if kind == 0 else "lq", size)
        model.set_parameters({k: v for k, v in state.items() if k != "ae.config"})
        return model

    def to_state(self) -> dict[str, np.ndarray]:
        state = self.state_dict()
        state["ae.config"] = self.config_vector()
        return state


# ---------------------------------------------------------------- FiLM denoiser

def time_embedding(t, dim: int = 64) -> np.ndarray:
    """Sinusoidal embedding of integer step indices, shape (N, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def film_apply(a: Tensor, cond: Tensor, w_gamma: Tensor, b_gamma: Tensor,
               w_beta: Tensor, b_beta: Tensor) -> Tensor:
    """gamma(cond) * a + beta(cond), per channel and identical at every position.

    ``gamma = 1 + cond @ w_gamma + b_gamma`` so zero weights give the identity.
    """
    if w_gamma.shape[1] != a.shape[1] or w_beta.shape[1] != a.shape[1]:
        raise ShapeError(f"FiLM weights {w_gamma.dims} do not match activation channels {a.shape[1]}")
    gamma = T.add(T.matmul(cond, w_gamma, b_gamma), 1.0)
    beta = T.matmul(cond, w_beta, b_beta)
    return T.affine_scale_shift(a, gamma, beta)


@dataclass
class DenoiserConfig:
    n_z: int = 8
    channels: tuple[int, int] = (32, 48)
    T: int = 100
    d_e: int = 64
    d_label: int = 16

    @property
    def d_cond(self) -> int:
        return self.d_e + self.d_label


class Denoiser(_Module):
    """Two-level U-net predicting noise, FiLM after every stage."""

    SITES = ("in", "down0", "down1", "up1", "up0")

    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c1, c2 = cfg.channels
        nz = cfg.n_z
        p: dict[str, np.ndarray] = {}

        def conv(name, c_out, c_in, k=3):
            p[name + ".w"] = _conv_init(rng, c_out, c_in, k, k)
            p[name + ".b"] = np.zeros(c_out, dtype=np.float32)

        def convt(name, c_in, c_out):
            p[name + ".w"] = np.ascontiguousarray(_conv_init(rng, c_out, c_in, 4, 4).transpose(1, 0, 2, 3))
            p[name + ".b"] = np.zeros(c_out, dtype=np.float32)

        conv("ldm.in", c1, nz)
        conv("ldm.down0", c2, c1)
        conv("ldm.down1", c2, c2)
        convt("ldm.up1.t", c2, c2)
        conv("ldm.up1", c2, 2 * c2)
        convt("ldm.up0.t", c2, c1)
        conv("ldm.up0", c1, 2 * c1)
        conv("ldm.out", nz, c1)
        p["ldm.out.w"] *= 0.1
        self.site_channels = {"in": c1, "down0": c2, "down1": c2, "up1": c2, "up0": c1}
        for site, ch in self.site_channels.items():
            for which in ("gamma", "beta"):
                p[f"ldm.film.{site}.{which}.w"] = np.zeros((cfg.d_cond, ch), dtype=np.float32)
                p[f"ldm.film.{site}.{which}.b"] = np.zeros(ch, dtype=np.float32)
        p["ldm.label"] = rng.normal(0.0, 1.0, size=(3, cfg.d_label)).astype(np.float32)
        self.params = {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}

    def conditioning(self, t_index, b) -> Tensor:
        """e_t concatenated with the label embedding; label 2 is the null condition."""
        t_index = np.atleast_1d(np.asarray(t_index))
        b = np.atleast_1d(np.asarray(b, dtype=np.int64))
        if b.size and (b.min() < 0 or b.max() > NULL_LABEL):
            raise ValueError(f"labels must be 0 (clear), 1 (adverse) or 2 (null), got {np.unique(b)}")
        e_t = Tensor._wrap(time_embedding(t_index, self.cfg.d_e))
        return T.concat([e_t, T.gather(self.params["ldm.label"], b)], axis=1)

    def _film(self, a: Tensor, cond: Tensor, site: str) -> Tensor:
        q = f"ldm.film.{site}"
        p = self.params
        return film_apply(a, cond, p[q + ".gamma.w"], p[q + ".gamma.b"], p[q + ".beta.w"], p[q + ".beta.b"])

    def __call__(self, z_t: Tensor, t_index, b) -> Tensor:
        """Predicted noise for (N, h, w, n_z) latents at physical step index 0 <= t < T."""
        if z_t.data.ndim != 4 or z_t.shape[-1] != self.cfg.n_z:
            raise ShapeError(f"denoiser expects (N, h, w, {self.cfg.n_z}), got {z_t.dims}")
        n, h, w, _ = z_t.shape
        if h % 4 or w % 4:
            raise ShapeError(f"latent grid {h}x{w} must be divisible by 4")
        t_index = np.broadcast_to(np.asarray(t_index, dtype=np.int64), (n,))
        if t_index.min() < 0 or t_index.max() >= self.cfg.T:
            raise ValueError(f"step index out of range [0, {self.cfg.T})")
        b = np.broadcast_to(np.asarray(b, dtype=np.int64), (n,))
        cond = self.conditioning(t_index, b)
        x = T.transpose(z_t, (0, 3, 1, 2))
        s0 = self._film(T.silu(self._conv(x, "ldm.in")), cond, "in")
        s1 = self._film(T.silu(self._conv(s0, "ldm.down0", (2, 2))), cond, "down0")
        m = self._film(T.silu(self._conv(s1, "ldm.down1", (2, 2))), cond, "down1")
        u = T.silu(self._convt(m, "ldm.up1.t", (2, 2)))
        u = self._film(T.silu(self._conv(T.concat([u, s1], axis=1), "ldm.up1")), cond, "up1")
        u = T.silu(self._convt(u, "ldm.up0.t", (2, 2)))
        u = self._film(T.silu(self._conv(T.concat([u, s0], axis=1), "ldm.up0")), cond, "up0")
        out = self._conv(u, "ldm.out")
        return T.transpose(out, (0, 2, 3, 1))

    def config_vector(self) -> np.ndarray:
        c = self.cfg
        return np.array([c.n_z, c.channels[0], c.channels[1], c.T, c.d_e, c.d_label], dtype=np.float32)

    def to_state(self) -> dict[str, np.ndarray]:
        state = self.state_dict()
        state["ldm.config"] = self.config_vector()
        return state

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "Denoiser":
        if "ldm.config" not in state:
            raise ShapeError("checkpoint has no denoiser (missing ldm.config)")
        nz, c1, c2, steps, d_e, d_l = (int(v) for v in state["ldm.config"])
        model = cls(DenoiserConfig(nz, (c1, c2), steps, d_e, d_l))
        model.set_parameters({k: v for k, v in state.items() if k.startswith("ldm.") and k != "ldm.config"})
        return model
