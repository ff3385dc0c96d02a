"""Dense float32 tensors with a reverse-mode tape.

Every operation accepts an optional leading batch axis so that training and
batched explanation passes run through the same kernels as single images.

    >>> with Tape() as tape:
    ...     x = tape.watch(Tensor([3.0]))
    ...     y = x * x
    >>> float(tape.gradient(y, [x])[0][0])
    6.0
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32
LOG_FLOOR = 1e-12

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand extents are inconsistent."""


class Tensor:
    """Immutable n-dimensional float32 array.

    Identity (not value) equality is used so tensors can key gradient tables.
    """

    __slots__ = ("data", "__weakref__")

    def __init__(self, data, copy: bool = True):
        arr = np.array(data, dtype=DTYPE, copy=True) if copy else np.asarray(data, dtype=DTYPE)
        arr.flags.writeable = False
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    # arithmetic sugar; all of it is recorded
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(arr: np.ndarray) -> Tensor:
    return Tensor(arr, copy=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray, tuple[bool, ...]], tuple[np.ndarray | None, ...]]
    name: str


@dataclass
class Tape:
    """Ordered record of primitive operations for reverse-mode differentiation.

    ``relu_mode="guided"`` makes every ReLU on this tape pass gradient only
    where both the activation input and the incoming gradient are positive.
    """

    relu_mode: str = "standard"
    records: list[_Record] = field(default_factory=list)
    _tracked: dict[int, Tensor] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.relu_mode not in ("standard", "guided"):
            raise ValueError(f"unknown relu_mode {self.relu_mode!r}")

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def watch(self, t: Tensor) -> Tensor:
        self._tracked[id(t)] = t
        return t

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _record(self, output, inputs, backward, name):
        self._tracked[id(output)] = output
        self.records.append(_Record(output, tuple(inputs), backward, name))

    def gradient(self, output: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        table = backward(self, output)
        return [table[s] for s in sources]


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _maybe_record(name, output_arr, inputs, backward_fn) -> Tensor:
    out = _wrap(output_arr)
    tape = active_tape()
    if tape is not None and any(tape.is_tracked(t) for t in inputs):
        tape._record(out, inputs, backward_fn, name)
    return out


def backward(tape: Tape, output: Tensor, seed: np.ndarray | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate gradients from ``output`` back through ``tape``.

    Returns a table mapping every tracked tensor that influences ``output``
    (watched leaves and intermediate results alike) to its gradient. Without
    ``seed`` the output must be a scalar.
    """
    if not tape.is_tracked(output):
        raise KeyError("output tensor is not recorded on this tape")
    if seed is None:
        if output.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        seed = np.ones(output.shape, dtype=DTYPE)
    grads: dict[int, np.ndarray] = {id(output): np.asarray(seed, dtype=DTYPE)}
    keys: dict[int, Tensor] = {id(output): output}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        need = tuple(tape.is_tracked(t) for t in rec.inputs)
        in_grads = rec.backward(g, need)
        for t, flag, gi in zip(rec.inputs, need, in_grads):
            if not flag or gi is None:
                continue
            prev = grads.get(id(t))
            grads[id(t)] = gi.astype(DTYPE, copy=False) if prev is None else prev + gi
            keys[id(t)] = t
    return {keys[k]: v for k, v in grads.items()}


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                _unbroadcast(g, b.shape) if need[1] else None)

    return _maybe_record("add", a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g, need):
        return (_unbroadcast(g * b.data, a.shape) if need[0] else None,
                _unbroadcast(g * a.data, b.shape) if need[1] else None)

    return _maybe_record("mul", a.data * b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _maybe_record("neg", -a.data, (a,), lambda g, need: (-g,))


def abs_(a: Tensor) -> Tensor:
    # subgradient 0 at the origin
    return _maybe_record("abs", np.abs(a.data), (a,), lambda g, need: (g * np.sign(a.data),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g, need):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0).astype(DTYPE),)

    return _maybe_record("sqrt", out, (a,), bw)


def square(a: Tensor) -> Tensor:
    return _maybe_record("square", a.data * a.data, (a,), lambda g, need: (2.0 * a.data * g,))


def log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    clipped = np.maximum(a.data, DTYPE(floor))

    def bw(g, need):
        return (np.where(a.data >= floor, g / clipped, 0.0).astype(DTYPE),)

    return _maybe_record("log", np.log(clipped), (a,), bw)


def relu(a: Tensor) -> Tensor:
    """Elementwise ``max(x, 0)``; the backward rule follows the tape's mode."""
    tape = active_tape()
    guided = tape is not None and tape.relu_mode == "guided"
    pos = a.data > 0

    def bw(g, need):
        gate = pos & (g > 0) if guided else pos
        return (g * gate,)

    return _maybe_record("relu", np.maximum(a.data, DTYPE(0)), (a,), bw)


# ------------------------------------------------------------------ structure


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis, dtype=DTYPE)

    def bw(g, need):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(DTYPE),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(DTYPE),)

    return _maybe_record("sum", np.asarray(out, dtype=DTYPE), (a,), bw)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(reduce_sum(a, axis), DTYPE(1.0 / n))


def reshape(a: Tensor, shape) -> Tensor:
    return _maybe_record("reshape", a.data.reshape(shape), (a,),
                         lambda g, need: (g.reshape(a.shape),))


def take(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing."""
    out = np.asarray(a.data[index], dtype=DTYPE)

    def bw(g, need):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _maybe_record("take", out, (a,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g, need):
        return tuple(np.take(g, i, axis=axis) if n else None for i, n in enumerate(need))

    return _maybe_record("stack", out, tensors, bw)


# ------------------------------------------------------------------- CNN ops


def _batched(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected rank {rank} or {rank + 1} input, got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or [B,C,H,W]) with ``kernel`` [O,C,kH,kW]."""
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding non-negative")
    xb, single = _batched(x.data, 3)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be rank 4, got shape {kernel.shape}")
    B, C, H, W = xb.shape
    O, Ck, kH, kW = kernel.shape
    if Ck != C:
        raise ShapeError(f"kernel in-channels {Ck} != input channels {C}")
    if kH > H + 2 * padding:
        raise ShapeError(f"kernel height {kH} exceeds padded input height {H + 2 * padding}")
    if kW > W + 2 * padding:
        raise ShapeError(f"kernel width {kW} exceeds padded input width {W + 2 * padding}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"bias extent {bias.shape} != out-channels ({O},)")
    Ho = (H + 2 * padding - kH) // stride + 1
    Wo = (W + 2 * padding - kW) // stride + 1
    Hp, Wp = H + 2 * padding, W + 2 * padding
    # channels-last im2col: columns ordered (kH, kW, C)
    k2 = kernel.data.transpose(0, 2, 3, 1).reshape(O, kH * kW * C)
    xt = xb.transpose(0, 2, 3, 1)
    if padding:
        xt = np.pad(xt, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    if kH == kW == 1:
        cols = np.ascontiguousarray(xt[:, ::stride, ::stride][:, :Ho, :Wo]).reshape(-1, C)
    else:
        cols = np.empty((B, Ho, Wo, kH, kW, C), dtype=DTYPE)
        for i in range(kH):
            for j in range(kW):
                cols[:, :, :, i, j] = xt[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]
        cols = cols.reshape(-1, kH * kW * C)
    out = cols @ k2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bw(g, need):
        gb = g[None] if single else g
        g2 = np.ascontiguousarray(gb.transpose(0, 2, 3, 1)).reshape(-1, O)
        gx = gk = gbias = None
        if need[0]:
            dcols = (g2 @ k2).reshape(B, Ho, Wo, kH, kW, C)
            gxt = np.zeros((B, Hp, Wp, C), dtype=DTYPE)
            for i in range(kH):
                for j in range(kW):
                    gxt[:, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += dcols[:, :, :, i, j]
            gx = np.ascontiguousarray(gxt[:, padding:padding + H, padding:padding + W].transpose(0, 3, 1, 2))
            if single:
                gx = gx[0]
        if need[1]:
            gk = (g2.T @ cols).reshape(O, kH, kW, C).transpose(0, 3, 1, 2)
        if len(need) > 2 and need[2]:
            gbias = g2.sum(axis=0)
        return (gx, gk, gbias)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _maybe_record("conv2d", out[0] if single else out, inputs, bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; ties route to the first cell in row-major order."""
    xb, single = _batched(x.data, 3)
    B, C, H, W = xb.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {H}x{W}")
    quads = (xb[:, :, 0::2, 0::2], xb[:, :, 0::2, 1::2], xb[:, :, 1::2, 0::2], xb[:, :, 1::2, 1::2])
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def bw(g, need):
        gb = g[None] if single else g
        gx = np.zeros_like(xb)
        taken = np.zeros(out.shape, dtype=bool)
        for (di, dj), q in zip(((0, 0), (0, 1), (1, 0), (1, 1)), quads):
            hit = (q == out) & ~taken
            taken |= hit
            gx[:, :, di::2, dj::2] = np.where(hit, gb, 0.0)
        return (gx[0] if single else gx,)

    return _maybe_record("maxpool2", out[0] if single else out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [...,C,H,W] -> [...,C]."""
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool needs [C,H,W] input, got {x.shape}")
    return reduce_mean(x, axis=(-2, -1))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``W x + b`` for x of shape [b1] or [B,b1]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input extent {x.shape[-1]} != weight in-features {weight.shape[1:]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias extent {bias.shape} != out-features ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def bw(g, need):
        gx = g @ weight.data if need[0] else None
        gw = None
        if need[1]:
            gw = np.outer(g, x.data) if g.ndim == 1 else g.T @ x.data
        gbias = None
        if len(need) > 2 and need[2]:
            gbias = g if g.ndim == 1 else g.sum(axis=0)
        return (gx, gw, gbias)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _maybe_record("linear", out, inputs, bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    if x.shape[-1] < 2:
        raise ShapeError("softmax needs at least two classes")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = (e / e.sum(axis=-1, keepdims=True)).astype(DTYPE)

    def bw(g, need):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _maybe_record("softmax", p, (x,), bw)


def cross_entropy(probs: Tensor, label) -> Tensor:
    """``-log(probs[label])`` with the probability floored at 1e-12.

    For batched probabilities ``label`` is an integer array and the result is
    the batch mean.
    """
    C = probs.shape[-1]
    labels = np.atleast_1d(np.asarray(label))
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"label {label!r} out of range for {C} classes")
    if probs.ndim == 1:
        return neg(log(take(probs, int(labels[0]))))
    if labels.shape != (probs.shape[0],):
        raise ShapeError(f"{labels.shape[0]} labels for batch of {probs.shape[0]}")
    picked = take(probs, (np.arange(len(labels)), labels))
    return neg(reduce_mean(log(picked)))


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # align_corners=False source coordinates, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the two trailing axes (align-corners false)."""
    if x.ndim < 2:
        raise ShapeError(f"upsample needs at least 2 spatial axes, got {x.shape}")
    h, w = x.shape[-2:]
    H, W = size
    if H < h or W < w:
        raise ShapeError(f"target {size} smaller than input {(h, w)}")
    ry = _interp_matrix(h, H)
    rx = _interp_matrix(w, W)
    out = np.einsum("Yy,...yx,Xx->...YX", ry, x.data.astype(np.float64), rx)
    lo, hi = x.data.min(), x.data.max()
    # rounding can only leave the input range by one ulp
    out = np.clip(out, lo, hi).astype(DTYPE)

    def bw(g, need):
        return (np.einsum("Yy,...YX,Xx->...yx", ry, g.astype(np.float64), rx).astype(DTYPE),)

    return _maybe_record("upsample_bilinear", out, (x,), bw)


def upsample_array(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Untracked convenience wrapper returning a plain array."""
    return upsample_bilinear(Tensor(arr), size).data.copy()


def parameters_equal(a: Iterable[np.ndarray], b: Iterable[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b, strict=True))
