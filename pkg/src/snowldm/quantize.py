"""Vector quantization (one codebook of vectors) and latent quantization
(one scalar codebook per latent component), both with straight-through
gradients.

Latent grids are channel-last: ``(..., n_z)``.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Quantized(NamedTuple):
    z_q: Tensor        # straight-through output, gradient identity to z
    raw: Tensor        # selected codebook values, gradient to the codebook
    indices: np.ndarray


class VqCodebook:
    """K learnable code vectors of length n_z."""

    kind = "vq"

    def __init__(self, vectors):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] < 1:
            raise ShapeError(f"VQ codebook must be (K, n_z) with K >= 1, got {vectors.shape}")
        self.vectors = Tensor(vectors, requires_grad=True, name="vq.codebook")

    @classmethod
    def init(cls, K: int, n_z: int, rng: np.random.Generator) -> "VqCodebook":
        return cls(rng.normal(0.0, 0.02, size=(K, n_z)))

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_z(self) -> int:
        return self.vectors.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {"vq.codebook": self.vectors}

    def learnable_scalars(self) -> int:
        return self.vectors.size

    def indices(self, z: np.ndarray, chunk: int = 1 << 22) -> np.ndarray:
        return vq_indices(z, self.vectors.data, chunk)

    def __call__(self, z: Tensor) -> Quantized:
        return vq_quantize(z, self)


class LqCodebooks:
    """n_z scalar codebooks of r_c learnable values each."""

    kind = "lq"

    def __init__(self, values):
        values = np.asarray(values, dtype=np.float32)
        if values.ndim != 2 or values.shape[1] < 1:
            raise ShapeError(f"LQ codebooks must be (n_z, r_c) with r_c >= 1, got {values.shape}")
        self.values = [Tensor(v, requires_grad=True, name=f"lq.codebook.{n}")
                       for n, v in enumerate(values)]

    @classmethod
    def init(cls, r_c: int, n_z: int) -> "LqCodebooks":
        return cls(np.tile(np.linspace(-1.0, 1.0, r_c), (n_z, 1)))

    @property
    def n_z(self) -> int:
        return len(self.values)

    @property
    def r_c(self) -> int:
        return self.values[0].shape[0]

    def table(self) -> np.ndarray:
        return np.stack([v.data for v in self.values])

    def parameters(self) -> dict[str, Tensor]:
        return {f"lq.codebook.{n}": v for n, v in enumerate(self.values)}

    def learnable_scalars(self) -> int:
        return sum(v.size for v in self.values)

    def indices(self, z: np.ndarray) -> np.ndarray:
        return lq_indices(z, self.table())

    def __call__(self, z: Tensor) -> Quantized:
        return lq_quantize(z, self)


def vq_indices(z: np.ndarray, vectors: np.ndarray, chunk: int = 1 << 22) -> np.ndarray:
    """Nearest code per site by Euclidean distance; ties go to the smallest index."""
    z = np.asarray(z, dtype=np.float64)
    vectors = np.asarray(vectors, dtype=np.float64)
    if z.shape[-1] != vectors.shape[1]:
        raise ShapeError(f"latent width {z.shape[-1]} != codebook width {vectors.shape[1]}")
    flat = z.reshape(-1, z.shape[-1])
    out = np.empty(flat.shape[0], dtype=np.int64)
    step = max(1, chunk // max(1, vectors.size))
    for s in range(0, flat.shape[0], step):
        diff = flat[s:s + step, None, :] - vectors[None, :, :]
        out[s:s + step] = np.argmin(np.sum(diff * diff, axis=-1), axis=1)
    return out.reshape(z.shape[:-1])


def lq_indices(z: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Per-component nearest scalar; ties go to the smallest index."""
    z = np.asarray(z, dtype=np.float64)
    table = np.asarray(table, dtype=np.float64)
    if z.shape[-1] != table.shape[0]:
        raise ShapeError(f"latent width {z.shape[-1]} != number of codebooks {table.shape[0]}")
    return np.argmin(np.abs(z[..., None] - table), axis=-1)


def vq_quantize(z: Tensor, cb: VqCodebook) -> Quantized:
    idx = cb.indices(z.data)
    raw = T.gather(cb.vectors, idx)
    return Quantized(T.straight_through(z, raw), raw, idx)


def lq_quantize(z: Tensor, cbs: LqCodebooks) -> Quantized:
    n_z = cbs.n_z
    if z.shape[-1] != n_z:
        raise ShapeError(f"latent width {z.shape[-1]} != number of codebooks {n_z}")
    idx = cbs.indices(z.data)
    flat = T.concat(cbs.values, axis=0)
    raw = T.gather(flat, idx + np.arange(n_z) * cbs.r_c)
    return Quantized(T.straight_through(z, raw), raw, idx)


def quantize_loss(z: Tensor, raw: Tensor) -> Tensor:
    """Mean ||sg(z) - z_q||^2; pulls codebook entries toward the encoder output."""
    if z.shape != raw.shape:
        raise ShapeError(f"quantize_loss: shapes {z.dims} and {raw.dims} differ")
    return T.mse_loss(T.stop_gradient(z), raw)


def commit_loss(z: Tensor, raw: Tensor) -> Tensor:
    """Mean ||z - sg(z_q)||^2; keeps the encoder near its selected codes."""
    if z.shape != raw.shape:
        raise ShapeError(f"commit_loss: shapes {z.dims} and {raw.dims} differ")
    return T.mse_loss(z, T.stop_gradient(raw))


def make_quantizer(kind: str, n_z: int, size: int, rng: np.random.Generator):
    """``size`` is K for VQ and r_c for LQ."""
    if kind == "vq":
        return VqCodebook.init(size, n_z, rng)
    if kind == "lq":
        return LqCodebooks.init(size, n_z)
    raise ValueError(f"unknown quantizer kind {kind!r}")
