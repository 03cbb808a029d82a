"""Dense-tensor numerics with reverse-mode gradients.

Implements exactly the operations needed by the keypoint network and its
training losses: 2-D convolution, 2x2 max pooling, the 65-channel cell
softmax, depth-to-space reshaping of cell probabilities, bicubic
descriptor upsampling, L2 normalization, and a handful of elementwise /
reduction primitives. Forward functions are pure. While a GradTape is
active on the calling thread, every op appends a backward closure to it;
``backward(tape, loss)`` replays the tape in reverse and accumulates
gradients for every tensor that participated.

Tensors wrap read-only numpy arrays and are treated as immutable values.
Use float64 for gradient checking; float32 is fine for inference.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "Gradients",
    "backward",
    "add",
    "sub",
    "mul",
    "affine",
    "reduce_sum",
    "reduce_mean",
    "relu",
    "conv2d",
    "max_pool2x2",
    "channel_softmax",
    "depth_to_space",
    "bicubic_upsample",
    "l2_normalize",
    "matmul",
    "transpose2d",
    "reshape",
    "slice_channels",
    "softmax_cross_entropy",
]

_FLOAT_DTYPES = (np.float32, np.float64)
_NORM_GUARD = 1e-12


class Tensor:
    """Immutable dense array of finite reals (row-major semantics)."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def _wrap(cls, arr) -> "Tensor":
        # Internal: take ownership of a freshly computed array, no copy.
        t = cls.__new__(cls)
        arr = np.asarray(arr)  # 0-d results arrive as numpy scalars
        arr.flags.writeable = False
        t.data = arr
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __neg__(self):
        return affine(self, -1.0, 0.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


class GradTape:
    """Wengert list of executed ops, confined to one thread."""

    def __init__(self):
        self._records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def _record(out: Tensor, inputs: tuple, backward_fn) -> None:
    stack = _tape_stack()
    if stack:
        stack[-1]._records.append((out, inputs, backward_fn))


class Gradients:
    """Gradient lookup per tensor; zeros for tensors the loss never used."""

    def __init__(self, by_id: dict, keepalive):
        self._by_id = by_id
        self._keepalive = keepalive  # pins tensor ids for the lookup lifetime

    def get(self, t: Tensor) -> np.ndarray:
        g = self._by_id.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g


def backward(tape: GradTape, loss: Tensor) -> Gradients:
    """Reverse-replay the tape from a scalar loss.

    Each recorded op is visited exactly once, in reverse execution order
    (which is a reverse topological order of the recorded graph).
    """
    if loss.data.shape != ():
        raise ValueError(f"loss must be a scalar tensor, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for out, inputs, backward_fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue  # not on any path to the loss
        for t, gi in zip(inputs, backward_fn(g)):
            if gi is None:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = gi if acc is None else acc + gi
    return Gradients(grads, tape)


# ---------------------------------------------------------------------------
# elementwise / reduction primitives
# ---------------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor._wrap(a.data + b.data)
    _record(out, (a, b), lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = Tensor._wrap(a.data - b.data)
    _record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = Tensor._wrap(a.data * b.data)
    _record(out, (a, b), lambda g: (g * b.data, g * a.data))
    return out


def affine(x: Tensor, scale: float, shift: float) -> Tensor:
    """Elementwise scale * x + shift with python-float coefficients."""
    out = Tensor._wrap(x.data * scale + shift)
    _record(out, (x,), lambda g: (g * scale,))
    return out


def reduce_sum(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(x.data.sum()))
    _record(out, (x,), lambda g: (np.broadcast_to(g, x.data.shape).copy(),))
    return out


def reduce_mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor._wrap(np.asarray(x.data.mean()))
    _record(out, (x,), lambda g: (np.broadcast_to(g / n, x.data.shape).copy(),))
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(x.data, 0))
    # subgradient at 0 is 0
    _record(out, (x,), lambda g: (g * (x.data > 0),))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dims {a.data.shape} @ {b.data.shape}")
    out = Tensor._wrap(a.data @ b.data)
    _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))
    return out


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError("transpose2d expects a 2-D tensor")
    out = Tensor._wrap(np.ascontiguousarray(x.data.T))
    _record(out, (x,), lambda g: (np.ascontiguousarray(g.T),))
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor._wrap(x.data.reshape(shape).copy())
    _record(out, (x,), lambda g: (g.reshape(x.data.shape),))
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the last axis; backward zero-pads the removed channels."""
    out = Tensor._wrap(np.ascontiguousarray(x.data[..., start:stop]))

    def back(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    _record(out, (x,), back)
    return out


# ---------------------------------------------------------------------------
# network building blocks
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an H x W x Cin input with a k x k x Cin x Cout kernel.

    Zero padding; output spatial size floor((H + 2p - k) / stride) + 1.
    """
    xv, kv, bv = x.data, kernel.data, bias.data
    if xv.ndim != 3:
        raise ValueError(f"conv2d input must be H x W x Cin, got shape {xv.shape}")
    if kv.ndim != 4 or kv.shape[0] != kv.shape[1]:
        raise ValueError(f"conv2d kernel must be k x k x Cin x Cout, got shape {kv.shape}")
    k = kv.shape[0]
    if k % 2 != 1:
        raise ValueError(f"conv2d kernel size must be odd, got {k}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if kv.shape[2] != xv.shape[2]:
        raise ValueError(f"conv2d: input has {xv.shape[2]} channels, kernel expects {kv.shape[2]}")
    if bv.shape != (kv.shape[3],):
        raise ValueError(f"conv2d: bias shape {bv.shape} does not match Cout {kv.shape[3]}")
    h, w, _ = xv.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {k} does not fit input {h}x{w} with padding {padding}")

    xp = np.pad(xv, ((padding, padding), (padding, padding), (0, 0)))
    sy, sx, sc = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp, (ho, wo, k, k, xv.shape[2]), (sy * stride, sx * stride, sy, sx, sc)
    )
    out = Tensor._wrap(np.tensordot(patches, kv, axes=([2, 3, 4], [0, 1, 2])) + bv)

    def back(g):
        gk = np.tensordot(patches, g, axes=([0, 1], [0, 1]))
        gb = g.sum(axis=(0, 1))
        gcols = np.tensordot(g, kv, axes=([2], [3]))  # (ho, wo, k, k, cin)
        gxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                gxp[di : di + stride * ho : stride, dj : dj + stride * wo : stride] += gcols[:, :, di, dj, :]
        gx = gxp[padding : padding + h, padding : padding + w]
        return (np.ascontiguousarray(gx), gk, gb)

    _record(out, (x, kernel, bias), back)
    return out


def max_pool2x2(x: Tensor) -> Tensor:
    """Per-channel 2x2 window maximum with stride 2."""
    xv = x.data
    if xv.ndim != 3:
        raise ValueError(f"max_pool2x2 input must be H x W x C, got shape {xv.shape}")
    h, w, c = xv.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2x2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = xv.reshape(h2, 2, w2, 2, c).transpose(0, 2, 4, 1, 3).reshape(h2, w2, c, 4)
    amax = win.argmax(axis=3)  # ties: first window position wins
    out = Tensor._wrap(np.take_along_axis(win, amax[..., None], axis=3)[..., 0])

    def back(g):
        gwin = np.zeros((h2, w2, c, 4), dtype=g.dtype)
        np.put_along_axis(gwin, amax[..., None], g[..., None], axis=3)
        gx = gwin.reshape(h2, w2, c, 2, 2).transpose(0, 3, 1, 4, 2).reshape(h, w, c)
        return (np.ascontiguousarray(gx),)

    _record(out, (x,), back)
    return out


def channel_softmax(x: Tensor) -> Tensor:
    """Softmax over the 65-channel axis, independently per cell."""
    xv = x.data
    if xv.ndim != 3 or xv.shape[2] != 65:
        raise ValueError(f"channel_softmax expects Hc x Wc x 65, got shape {xv.shape}")
    z = xv - xv.max(axis=2, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=2, keepdims=True)
    out = Tensor._wrap(y)
    _record(out, (x,), lambda g: (y * (g - (g * y).sum(axis=2, keepdims=True)),))
    return out


def depth_to_space(x: Tensor) -> Tensor:
    """Hc x Wc x 64 cell tensor to the 8Hc x 8Wc pixel map.

    Channel c of cell (i, j) lands on pixel (8i + c // 8, 8j + c % 8), so the
    64 channels tile each cell row-major. Total mass is preserved exactly.
    """
    xv = x.data
    if xv.ndim != 3 or xv.shape[2] != 64:
        raise ValueError(f"depth_to_space expects Hc x Wc x 64, got shape {xv.shape}")
    hc, wc, _ = xv.shape
    y = xv.reshape(hc, wc, 8, 8).transpose(0, 2, 1, 3).reshape(hc * 8, wc * 8)
    out = Tensor._wrap(np.ascontiguousarray(y))

    def back(g):
        gx = g.reshape(hc, 8, wc, 8).transpose(0, 2, 1, 3).reshape(hc, wc, 64)
        return (np.ascontiguousarray(gx),)

    _record(out, (x,), back)
    return out


def space_to_depth(y: np.ndarray) -> np.ndarray:
    """Exact inverse of depth_to_space, on plain arrays (no gradient)."""
    h, w = y.shape
    if h % 8 or w % 8:
        raise ValueError(f"space_to_depth needs dims divisible by 8, got {h}x{w}")
    return y.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3).reshape(h // 8, w // 8, 64)


def _cubic_kernel(d: np.ndarray) -> np.ndarray:
    # Catmull-Rom (a = -0.5) cubic convolution kernel.
    d = np.abs(d)
    near = ((1.5 * d - 2.5) * d) * d + 1.0
    far = (((-0.5 * d + 2.5) * d) - 4.0) * d + 2.0
    return np.where(d <= 1.0, near, np.where(d < 2.0, far, 0.0))


def _upsample_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    n_out = n_in * factor
    out_idx = np.arange(n_out)
    src = (out_idx + 0.5) / factor - 0.5  # align-corners = false
    base = np.floor(src).astype(np.int64)
    t = src - base
    w = np.zeros((n_out, n_in), dtype=dtype)
    for tap in (-1, 0, 1, 2):
        idx = np.clip(base + tap, 0, n_in - 1)  # edge clamp
        np.add.at(w, (out_idx, idx), _cubic_kernel(t - tap).astype(dtype))
    return w


def bicubic_upsample(x: Tensor, factor: int) -> Tensor:
    """Separable Catmull-Rom bicubic upsampling of an Hc x Wc x C map."""
    xv = x.data
    if xv.ndim != 3:
        raise ValueError(f"bicubic_upsample expects Hc x Wc x C, got shape {xv.shape}")
    if int(factor) != factor or factor < 1:
        raise ValueError(f"bicubic_upsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    wh = _upsample_matrix(xv.shape[0], factor, xv.dtype)
    ww = _upsample_matrix(xv.shape[1], factor, xv.dtype)
    y = np.einsum("oi,pj,ijc->opc", wh, ww, xv, optimize=True)
    out = Tensor._wrap(y)
    _record(out, (x,), lambda g: (np.einsum("oi,pj,opc->ijc", wh, ww, g, optimize=True),))
    return out


def l2_normalize(x: Tensor) -> Tensor:
    """Normalize each trailing-dimension vector; zero vectors stay zero."""
    xv = x.data
    if xv.ndim < 1:
        raise ValueError("l2_normalize expects at least one dimension")
    n = np.sqrt((xv * xv).sum(axis=-1, keepdims=True))
    safe = n > _NORM_GUARD
    neff = np.where(safe, n, _NORM_GUARD)
    y = xv / neff
    out = Tensor._wrap(y)

    def back(g):
        dot = (g * xv).sum(axis=-1, keepdims=True)
        gx = g / neff - np.where(safe, xv * dot / neff**3, 0.0)
        return (gx,)

    _record(out, (x,), back)
    return out


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the last axis against integer targets."""
    lv = logits.data
    targets = np.asarray(targets)
    if targets.shape != lv.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {lv.shape}")
    nc = lv.shape[-1]
    if targets.min() < 0 or targets.max() >= nc:
        raise ValueError("target channel out of range")
    m = lv.max(axis=-1, keepdims=True)
    z = lv - m
    e = np.exp(z)
    se = e.sum(axis=-1)
    lse = np.log(se)
    picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    n = targets.size
    out = Tensor._wrap(np.asarray((lse - picked).sum() / n))

    def back(g):
        p = e / se[..., None]
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return ((p - onehot) * (g / n),)

    _record(out, (logits,), back)
    return out
