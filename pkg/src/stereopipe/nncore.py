"""Minimal dense tensor math with reverse-mode differentiation.

Covers exactly the layer vocabulary the matching and disparity networks
need: 2-d convolution, fully-connected, relu/tanh/sigmoid, log-softmax and
the constant-highway weighted skip addition.  Forward passes record a
linear tape of per-op backward closures; `backward` replays it in reverse
topological order.  Everything is float64 by default so finite-difference
checks are trustworthy; inference helpers accept a dtype override.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InputError, StateError

CHECKPOINT_MAGIC = b"resmatch-ckpt-v1\n"


class Tensor:
    """Dense N-d float array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Param:
    """Learned weight: a named Tensor plus a momentum buffer for SGD."""

    def __init__(self, value, name=""):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.name = name
        self.velocity = None

    @property
    def data(self):
        return self.value.data

    @property
    def grad(self):
        return self.value.grad


@dataclass
class LayerSpec:
    """Description of one layer, stored in checkpoints."""

    kind: str
    shape: tuple = ()
    padding: int = 0
    extra: dict = field(default_factory=dict)


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def constant(x):
    """Wrap a value as a graph-free Tensor (no gradient flows into it)."""
    return Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a, b):
    out = Tensor(a.data + b.data, (a, b))

    def bwd(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(_unbroadcast(g, b.data.shape))

    out._backward = bwd
    return out


def sub(a, b):
    out = Tensor(a.data - b.data, (a, b))

    def bwd(g):
        a.accumulate(_unbroadcast(g, a.data.shape))
        b.accumulate(-_unbroadcast(g, b.data.shape))

    out._backward = bwd
    return out


def mul(a, b):
    out = Tensor(a.data * b.data, (a, b))

    def bwd(g):
        a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = bwd
    return out


def scale(a, c):
    c = float(c)
    out = Tensor(a.data * c, (a,))
    out._backward = lambda g: a.accumulate(g * c)
    return out


def neg(a):
    return scale(a, -1.0)


def sum_(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def bwd(g):
        if axis is None:
            a.accumulate(np.full_like(a.data, g if keepdims is False else g.item()))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(g, a.data.shape).copy())

    out._backward = bwd
    return out


def div(a, b):
    out = Tensor(a.data / b.data, (a, b))

    def bwd(g):
        a.accumulate(_unbroadcast(g / b.data, a.data.shape))
        b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward = bwd
    return out


def sqrt(a):
    y = np.sqrt(a.data)
    out = Tensor(y, (a,))
    out._backward = lambda g: a.accumulate(g / (2.0 * y))
    return out


def mean_(a, axis=None):
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), (a,))
    out._backward = lambda g: a.accumulate(g.reshape(a.data.shape))
    return out


def concat(tensors, axis=0):
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g):
        splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        for t, piece in zip(tensors, splits):
            t.accumulate(piece)

    out._backward = bwd
    return out


def relu(a):
    out = Tensor(np.maximum(a.data, 0.0), (a,))
    # subgradient at 0 is 0
    out._backward = lambda g: a.accumulate(g * (a.data > 0))
    return out


def tanh(a):
    y = np.tanh(a.data)
    out = Tensor(y, (a,))
    out._backward = lambda g: a.accumulate(g * (1.0 - y * y))
    return out


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y, (a,))
    out._backward = lambda g: a.accumulate(g * y * (1.0 - y))
    return out


def log(a):
    out = Tensor(np.log(a.data), (a,))
    out._backward = lambda g: a.accumulate(g / a.data)
    return out


def clip(a, lo, hi):
    """Clamp with a straight-through-outside-of-range-blocked gradient."""
    y = np.clip(a.data, lo, hi)
    out = Tensor(y, (a,))
    mask = (a.data > lo) & (a.data < hi)
    out._backward = lambda g: a.accumulate(g * mask)
    return out


def log_softmax(a):
    """Log-softmax over the last axis."""
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = Tensor(y, (a,))

    def bwd(g):
        soft = np.exp(y)
        a.accumulate(g - soft * g.sum(axis=-1, keepdims=True))

    out._backward = bwd
    return out


def highway_add(f_out, skip_in, lam):
    """Weighted residual addition: f_out + lambda * skip_in.

    `lam` is a scalar Param (or its Tensor); its gradient accumulates the
    inner product of the output gradient with the skipped activation.
    """
    lt = lam.value if isinstance(lam, Param) else lam
    if f_out.data.shape != skip_in.data.shape:
        raise ConfigurationError(
            f"highway_add shape mismatch: {f_out.data.shape} vs {skip_in.data.shape}"
        )
    out = Tensor(f_out.data + lt.data * skip_in.data, (f_out, skip_in, lt))

    def bwd(g):
        f_out.accumulate(g)
        skip_in.accumulate(g * lt.data)
        lt.accumulate(np.sum(g * skip_in.data))

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# conv2d / fully-connected


def _corr_raw(x, w, padding):
    """Cross-correlation of x (N,C,H,W) with w (O,C,kh,kw), stride 1."""
    kh, kw = w.shape[2], w.shape[3]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ConfigurationError(
            f"kernel {kh}x{kw} does not fit padded input {x.shape[2]}x{x.shape[3]}"
        )
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # (N,C,H',W',kh,kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(
        x.shape[0], win.shape[2], win.shape[3], -1
    )
    out = cols @ w.reshape(w.shape[0], -1).T
    return out.transpose(0, 3, 1, 2), cols


def conv2d_raw(x, w, b, padding, dtype=None):
    """Inference-path convolution on plain arrays; x is (C,H,W) or (N,C,H,W)."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if dtype is not None:
        x, w, b = x.astype(dtype), w.astype(dtype), b.astype(dtype)
    if x.shape[1] != w.shape[1]:
        raise ConfigurationError(
            f"conv2d input has {x.shape[1]} channels, weights expect {w.shape[1]}"
        )
    out, _ = _corr_raw(x, w, padding)
    out = out + b[None, :, None, None]
    return out[0] if squeeze else out


def conv2d(x, weights, bias, padding):
    """Tape-recorded 2-d convolution (cross-correlation), stride 1."""
    w, b = weights.value, bias.value
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.shape[1] != w.data.shape[1]:
        raise ConfigurationError(
            f"conv2d input has {xd.shape[1]} channels, weights expect {w.data.shape[1]}"
        )
    y, cols = _corr_raw(xd, w.data, padding)
    y = y + b.data[None, :, None, None]
    out = Tensor(y[0] if squeeze else y, (x, w, b))
    kh, kw = w.data.shape[2], w.data.shape[3]

    def bwd(g):
        g4 = g[None] if squeeze else g
        dw = np.tensordot(g4, cols, axes=([0, 2, 3], [0, 1, 2]))
        w.accumulate(dw.reshape(w.data.shape))
        b.accumulate(g4.sum(axis=(0, 2, 3)))
        wt = np.flip(w.data, axis=(2, 3)).transpose(1, 0, 2, 3)
        dx, _ = _corr_raw(g4, wt, kh - 1 - padding)
        x.accumulate(dx[0] if squeeze else dx)

    out._backward = bwd
    return out


def fc_raw(x, w, b, dtype=None):
    """Inference-path fully-connected layer; x is (n,) or (N,n)."""
    if dtype is not None:
        x, w, b = x.astype(dtype), w.astype(dtype), b.astype(dtype)
    if x.shape[-1] != w.shape[1]:
        raise ConfigurationError(
            f"fc input width {x.shape[-1]} does not match weights {w.shape}"
        )
    return x @ w.T + b


def fc(x, weights, bias):
    """Tape-recorded affine layer: out = x @ W.T + b."""
    w, b = weights.value, bias.value
    if x.data.shape[-1] != w.data.shape[1]:
        raise ConfigurationError(
            f"fc input width {x.data.shape[-1]} does not match weights {w.data.shape}"
        )
    out = Tensor(x.data @ w.data.T + b.data, (x, w, b))

    def bwd(g):
        x2 = x.data if x.data.ndim == 2 else x.data[None]
        g2 = g if g.ndim == 2 else g[None]
        w.accumulate(g2.T @ x2)
        b.accumulate(g2.sum(axis=0))
        x.accumulate((g2 @ w.data).reshape(x.data.shape))

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# backward pass and optimizer


def backward(loss):
    """Back-propagate from a scalar loss through the recorded graph."""
    if loss.data.size != 1:
        raise ConfigurationError("backward expects a scalar loss")
    if not loss._parents:
        raise StateError("backward called before any forward pass was recorded")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params):
    for p in params:
        p.value.grad = None


def sgd_step(params, lr, momentum=0.0):
    """Classical momentum update; velocity buffers persist on the Params."""
    for p in params:
        if p.grad is None:
            raise StateError(f"param {p.name!r} has no gradient; run backward first")
        if p.velocity is None:
            p.velocity = np.zeros_like(p.data)
        p.velocity *= momentum
        p.velocity += p.grad
        p.value.data -= lr * p.velocity


def init_uniform(shape, fan_in, rng):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path, meta, params):
    """Write a self-describing checkpoint: header, JSON index, raw float64."""
    index = {
        "meta": meta,
        "params": [{"name": p.name, "shape": list(p.data.shape)} for p in params],
    }
    blob = json.dumps(index).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for p in params:
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (meta, {name: ndarray})."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise InputError(f"{path}: not a {CHECKPOINT_MAGIC.strip().decode()} file")
        (n,) = struct.unpack("<Q", f.read(8))
        index = json.loads(f.read(n).decode("utf-8"))
        values = {}
        for entry in index["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            values[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return index["meta"], values
