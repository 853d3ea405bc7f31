"""Dense tensors with tape-based reverse-mode differentiation.

Every op is a pure function returning a new :class:`Tensor`.  While a
:class:`Tape` is active, ops whose inputs require gradients append a record
holding a vector-Jacobian product; :meth:`Tape.backward` replays the records
in reverse.  Without an active tape ops simply compute values.

Arrays are float32 unless :func:`precision` selects another dtype (gradient
checks run in float64 so finite differences are meaningful).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NumericError", "precision", "tensor",
    "add", "sub", "mul", "matmul", "conv2d", "conv2d_transpose", "relu",
    "silu", "tanh", "reshape", "transpose", "concat", "mean", "sum",
    "l1_loss", "mse_loss", "stop_gradient", "straight_through",
    "affine_scale_shift", "gather", "backward", "check_gradients",
]


class ShapeError(ValueError):
    """Input shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """An op produced NaN or Inf."""


_local = threading.local()
_ids = itertools.count()


def _dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily create tensors with ``dtype`` (thread-local)."""
    prev = _dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = prev


class Tensor:
    """Immutable n-d array plus a gradient flag and a unique node id."""

    __slots__ = ("data", "requires_grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_dtype())
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.ascontiguousarray(arr, dtype=_dtype())
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = False
        out.id = next(_ids)
        out.name = None
        return out

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


@dataclass
class _Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered op records for one forward pass; confined to one thread."""

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.tapes.pop()

    def leaves(self) -> list[Tensor]:
        produced = {r.output.id for r in self.records}
        seen: dict[int, Tensor] = {}
        for r in self.records:
            for t in r.inputs:
                if t.requires_grad and t.id not in produced:
                    seen.setdefault(t.id, t)
        return list(seen.values())

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] = ()) -> dict[int, Tensor]:
        """Gradients of scalar ``loss`` for every leaf on the tape and in ``wrt``.

        Leaves the loss does not depend on get an all-zero gradient.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got dims {loss.dims}")
        if not self.records:
            raise ValueError("backward on an empty tape")
        grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape, dtype=loss.data.dtype)}
        for rec in reversed(self.records):
            g = grads.pop(rec.output.id, None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.id in grads:
                    grads[t.id] = grads[t.id] + gi
                else:
                    grads[t.id] = gi
        out: dict[int, Tensor] = {}
        for t in list(self.leaves()) + list(wrt):
            g = grads.get(t.id)
            if g is None:
                g = np.zeros(t.shape, dtype=t.data.dtype)
            out[t.id] = Tensor._wrap(g.reshape(t.shape))
        return out


def _active_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def backward(loss: Tensor, wrt: Sequence[Tensor] = ()) -> dict[int, Tensor]:
    """Run :meth:`Tape.backward` on the innermost active tape."""
    tape = _active_tape()
    if tape is None:
        raise ValueError("backward called outside a Tape context")
    return tape.backward(loss, wrt)


def _emit(kind: str, inputs: Sequence[Tensor], value: np.ndarray, vjp) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{kind} produced non-finite values")
    out = Tensor._wrap(value)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(kind, tuple(inputs), out, vjp))
    return out


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x))


def _binary_shapes(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{kind}: shapes {a.dims} and {b.dims} are incompatible")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0), lambda g: (g * mask,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-np.clip(x, -80, 80)))
    return _emit("silu", (a,), x * sig,
                 lambda g: (g * (sig * (1 + x * (1 - sig))),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit("tanh", (a,), y, lambda g: (g * (1 - y * y),))


def stop_gradient(a: Tensor) -> Tensor:
    return _emit("stop_gradient", (a,), a.data, lambda g: (None,))


def straight_through(z: Tensor, target: Tensor) -> Tensor:
    """Value of ``target``; gradient identity to ``z`` and none to ``target``.

    Equals ``z + stop_gradient(target - z)`` but the forward value is the
    target bit-for-bit instead of a rounded sum.
    """
    if z.shape != target.shape:
        raise ShapeError(f"straight_through: shapes {z.dims} and {target.dims} differ")
    return _emit("straight_through", (z, target), target.data, lambda g: (g, None))


def affine_scale_shift(a: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel ``gamma * a + beta`` for ``a`` shaped (N, C, ...).

    ``gamma`` and ``beta`` are (C,) or (N, C) and apply uniformly over the
    trailing spatial axes.
    """
    if a.data.ndim < 2:
        raise ShapeError(f"affine_scale_shift: activation needs (N, C, ...), got {a.dims}")
    n, c = a.shape[:2]
    for nm, p in (("gamma", gamma), ("beta", beta)):
        if p.shape not in ((c,), (n, c)):
            raise ShapeError(
                f"affine_scale_shift: {nm} dims {p.dims} do not match activation {a.dims}")
    extra = (1,) * (a.data.ndim - 2)

    def expand(p):
        return p.data.reshape((1, c) + extra) if p.data.ndim == 1 else p.data.reshape((n, c) + extra)

    ga, be = expand(gamma), expand(beta)
    spatial = tuple(range(2, a.data.ndim))

    def reduce(g, p):
        r = g.sum(axis=spatial) if spatial else g
        return r.sum(axis=0) if p.data.ndim == 1 else r

    return _emit("affine_scale_shift", (a, gamma, beta), ga * a.data + be,
                 lambda g: (g * ga, reduce(g * a.data, gamma), reduce(g, beta)))


# ---------------------------------------------------------------- structure

def reshape(a: Tensor, dims: Sequence[int]) -> Tensor:
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.dims} as {list(dims)}")
    return _emit("reshape", (a,), a.data.reshape(dims), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: dims {t.dims} incompatible with {list(ref)} on axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _emit("concat", tensors, np.concatenate([t.data for t in tensors], axis=ax),
                 lambda g: tuple(np.split(g, bounds, axis=ax)))


def gather(src: Tensor, indices, axis: int = 0) -> Tensor:
    """Rows of ``src`` picked by integer ``indices`` (output dims = idx dims + row dims)."""
    if axis != 0:
        raise ShapeError("gather only supports axis 0")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= src.shape[0]):
        raise ShapeError(f"gather: index out of range for {src.dims}")

    def vjp(g):
        acc = np.zeros(src.shape, dtype=g.dtype)
        np.add.at(acc, idx.reshape(-1), g.reshape((-1,) + src.shape[1:]))
        return (acc,)

    return _emit("gather", (src,), src.data[idx], vjp)


# ---------------------------------------------------------------- reductions and losses

def mean(a: Tensor) -> Tensor:
    n = a.size
    return _emit("mean", (a,), np.asarray(a.data.mean(dtype=a.data.dtype)),
                 lambda g: (np.full(a.shape, g / n, dtype=a.data.dtype),))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    return _emit("sum", (a,), np.asarray(a.data.sum(dtype=a.data.dtype)),
                 lambda g: (np.full(a.shape, g, dtype=a.data.dtype),))


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute error; subgradient 0 where a == b."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss: shapes {a.dims} and {b.dims} differ")
    d = a.data - b.data
    n = d.size

    def vjp(g):
        s = np.sign(d) * (g / n)
        return s, -s

    return _emit("l1_loss", (a, b), np.asarray(np.abs(d).mean(dtype=d.dtype)), vjp)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shapes {a.dims} and {b.dims} differ")
    d = a.data - b.data
    n = d.size

    def vjp(g):
        s = d * (2 * g / n)
        return s, -s

    return _emit("mse_loss", (a, b), np.asarray((d * d).mean(dtype=d.dtype)), vjp)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor, bias: Tensor | None = None) -> Tensor:
    """(M, K) @ (K, N) with an optional length-N bias added to every row."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.dims} and {b.dims} are incompatible")
    out = a.data @ b.data
    inputs: tuple[Tensor, ...] = (a, b)
    if bias is not None:
        if bias.shape != (b.shape[1],):
            raise ShapeError(f"matmul: bias dims {bias.dims} do not match output width {b.shape[1]}")
        out = out + bias.data
        inputs = (a, b, bias)

    def vjp(g):
        grads = [g @ b.data.T, a.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _emit("matmul", inputs, out, vjp)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _columns(x: np.ndarray, kh: int, kw: int, stride, padding, ho: int, wo: int) -> np.ndarray:
    """im2col as (N, C * kh * kw, Ho * Wo), built from shifted slices."""
    sh, sw = stride
    ph, pw = padding
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((n, c, kh * kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = xp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride, padding) -> np.ndarray:
    n, _, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _conv_out(h, kh, stride[0], padding[0]), _conv_out(wd, kw, stride[1], padding[1])
    cols = _columns(x, kh, kw, stride, padding, ho, wo)
    return np.matmul(w.reshape(o, -1), cols).reshape(n, o, ho, wo)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, x_shape, stride, padding) -> np.ndarray:
    sh, sw = stride
    ph, pw = padding
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    ho, wo = g.shape[2:]
    dcols = np.matmul(w.reshape(o, -1).T, g.reshape(n, o, ho * wo)).reshape(n, c, kh * kw, ho, wo)
    gp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += dcols[:, :, i * kw + j]
    return gp[:, :, ph:ph + h, pw:pw + wd]


def _conv_weight_grad(g: np.ndarray, x: np.ndarray, w_shape, stride, padding) -> np.ndarray:
    o, _, kh, kw = w_shape
    n = g.shape[0]
    ho, wo = g.shape[2:]
    cols = _columns(x, kh, kw, stride, padding, ho, wo)
    gw = np.matmul(g.reshape(n, o, ho * wo), cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(w_shape)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Cross-correlation of x (N, C, H, W) with w (O, C, kh, kw), zero padding."""
    stride, padding = _pair(stride), _pair(padding)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input dims {x.dims} and kernel dims {w.dims} are incompatible")
    ho = _conv_out(x.shape[2], w.shape[2], stride[0], padding[0])
    wo = _conv_out(x.shape[3], w.shape[3], stride[1], padding[1])
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel dims {w.dims} larger than padded input {x.dims}")
    out = _conv_forward(x.data, w.data, stride, padding)
    inputs: tuple[Tensor, ...] = (x, w)
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias dims {bias.dims} do not match {w.shape[0]} channels")
        out = out + bias.data.reshape(1, -1, 1, 1)
        inputs = (x, w, bias)

    def vjp(g):
        grads = [
            _conv_input_grad(g, w.data, x.shape, stride, padding) if x.requires_grad else None,
            _conv_weight_grad(g, x.data, w.shape, stride, padding) if w.requires_grad else None,
        ]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _emit("conv2d", inputs, out, vjp)


def conv2d_transpose(x: Tensor, w: Tensor, bias: Tensor | None = None,
                     stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Adjoint of :func:`conv2d`; w is (C_in, C_out, kh, kw).

    Output spatial size is ``(H - 1) * stride - 2 * padding + k``.
    """
    stride, padding = _pair(stride), _pair(padding)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"conv2d_transpose: input dims {x.dims} and kernel dims {w.dims} are incompatible")
    n, _, h, wd = x.shape
    kh, kw = w.shape[2:]
    ho = (h - 1) * stride[0] - 2 * padding[0] + kh
    wo = (wd - 1) * stride[1] - 2 * padding[1] + kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d_transpose: empty output for input {x.dims}, kernel {w.dims}")
    out_shape = (n, w.shape[1], ho, wo)
    if (_conv_out(ho, kh, stride[0], padding[0]), _conv_out(wo, kw, stride[1], padding[1])) != (h, wd):
        raise ShapeError(f"conv2d_transpose: padding {padding} inconsistent with kernel {w.dims}")
    out = _conv_input_grad(x.data, w.data, out_shape, stride, padding)
    inputs: tuple[Tensor, ...] = (x, w)
    if bias is not None:
        if bias.shape != (w.shape[1],):
            raise ShapeError(
                f"conv2d_transpose: bias dims {bias.dims} do not match {w.shape[1]} channels")
        out = out + bias.data.reshape(1, -1, 1, 1)
        inputs = (x, w, bias)

    def vjp(g):
        grads = [
            _conv_forward(g, w.data, stride, padding) if x.requires_grad else None,
            _conv_weight_grad(x.data, g, w.shape, stride, padding) if w.requires_grad else None,
        ]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _emit("conv2d_transpose", inputs, out, vjp)


# ---------------------------------------------------------------- gradient checking

def check_gradients(builder, seed: int = 0, eps: float = 2.0 ** -10,
                    max_coords: int | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``builder(rng)`` returns ``(fn, arrays)``: ``fn(*tensors)`` maps leaf
    tensors to a scalar loss.  Both routes run in float64.  With
    ``max_coords`` only that many randomly chosen coordinates per leaf are
    differenced.  The default step is the power of two nearest 1e-3 so the
    perturbed inputs are exactly representable.
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        fn, arrays = builder(rng)
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        with Tape() as tape:
            loss = fn(*leaves)
            grads = tape.backward(loss, wrt=leaves)

        def evaluate(vals):
            return fn(*[Tensor(v) for v in vals]).item()

        worst = 0.0
        for k, leaf in enumerate(leaves):
            g_ad = grads[leaf.id].data.reshape(-1)
            flat = arrays[k].reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            g_fd = np.zeros(coords.size)
            for m, ci in enumerate(coords):
                vals = [a.copy() for a in arrays]
                vals[k].reshape(-1)[ci] = flat[ci] + eps
                hi = evaluate(vals)
                vals[k].reshape(-1)[ci] = flat[ci] - eps
                lo = evaluate(vals)
                g_fd[m] = (hi - lo) / (2 * eps)
            err = np.max(np.abs(g_ad[coords] - g_fd)) / (np.max(np.abs(g_fd)) + 1e-8)
            worst = max(worst, float(err))
    return worst
