"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op appends a node to a thread-local tape when any input
requires a gradient. ``backward`` replays the tape in reverse recording order,
accumulating gradients additively, then clears it.

Training runs in float32; passing float64 arrays keeps every op in double
precision, which the finite-difference checks rely on.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from . import kernels

PROB_CLAMP = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.float32
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1) if requires_grad else arr
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out, inputs, fn):
        self.out = out
        self.inputs = inputs
        self.fn = fn


class ComputationTape:
    """Ordered record of differentiable ops awaiting a backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()


_local = threading.local()


def get_tape() -> ComputationTape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = ComputationTape()
    return tape


@contextlib.contextmanager
def no_grad():
    tape = get_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def _result(data, inputs, fn, name):
    if not np.isfinite(data).all():
        raise NumericError(f"{name}: non-finite values in output")
    tape = get_tape()
    track = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = track
    if track:
        tape.nodes.append(_Node(out, inputs, fn))
    return out


def _accumulate(t: Tensor, g):
    if not t.requires_grad or g is None:
        return
    if g.shape != t.data.shape:
        g = g.reshape(t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor):
    """Populate ``.grad`` on every tensor that requires one, then clear the tape."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    if not loss.requires_grad or not any(n.out is loss for n in reversed(tape.nodes)):
        raise ContractError("loss is not connected to the computation tape")
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(tape.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.fn(g)
            for t, gi in zip(node.inputs, grads):
                _accumulate(t, gi)
            if node.out is not loss:
                node.out.grad = None
    finally:
        tape.clear()


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(
        np.asarray(x.data.sum(), dtype=x.dtype).reshape(1),
        (x,),
        lambda g: (np.broadcast_to(g.reshape(()), shape),),
        "sum",
    )


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------------------
# layers


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W.T + b`` for ``x[B, n_in]``, ``W[n_out, n_in]``, ``b[n_out]``."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"affine: incompatible shapes x{x.shape} W{W.shape} b{b.shape}")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T + b.data

    def fn(g):
        return g @ Wd, g.T @ xd, g.sum(axis=0)

    return _result(out, (x, W, b), fn, "affine")


def conv_output_length(length, k, stride=1, dilation=1, padding=0):
    return (length + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv1d(x: Tensor, W: Tensor, b: Tensor, stride=1, dilation=1, padding=0) -> Tensor:
    """Cross-correlation of ``x[B, C_in, L]`` with ``W[C_out, C_in, k]``."""
    if x.data.ndim != 3 or W.data.ndim != 3 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"conv1d: incompatible shapes x{x.shape} W{W.shape} b{b.shape}")
    bsz, c_in, length = x.shape
    c_out, _, k = W.shape
    l_out = conv_output_length(length, k, stride, dilation, padding)
    if l_out < 1:
        raise ShapeError(f"conv1d: non-positive output length {l_out}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding)))
    lp = xp.shape[2]
    cols = kernels.im2col(np.ascontiguousarray(xp), k, stride, dilation, l_out)
    Wm = W.data.reshape(c_out, c_in * k)
    out = np.matmul(Wm, cols) + b.data[None, :, None]

    def fn(g):
        g = np.ascontiguousarray(g)
        dW = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(W.shape)
        db = g.sum(axis=(0, 2))
        dx = None
        if x.requires_grad:
            dcols = np.ascontiguousarray(np.matmul(Wm.T, g))
            dxp = kernels.col2im(dcols, c_in, lp, k, stride, dilation)
            dx = dxp[:, :, padding : lp - padding] if padding else dxp
        return dx, dW, db

    return _result(out, (x, W, b), fn, "conv1d")


class BatchNormState:
    """Running statistics of one batch-norm layer."""

    def __init__(self, channels, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool,
                momentum=BN_MOMENTUM, eps=BN_EPS) -> Tensor:
    """Per-channel normalization of ``x[B, C]`` or ``x[B, C, L]``."""
    if x.data.ndim not in (2, 3) or x.shape[1] != gamma.shape[0] or gamma.shape != beta.shape:
        raise ShapeError(f"batchnorm1d: channel mismatch x{x.shape} gamma{gamma.shape}")
    xd = x.data
    axes = (0,) if xd.ndim == 2 else (0, 2)
    bshape = (1, -1) if xd.ndim == 2 else (1, -1, 1)
    n = xd.size // xd.shape[1]
    if training:
        if n < 2:
            raise ShapeError("batchnorm1d: train mode needs more than one value per channel")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        state.running_mean *= 1 - momentum
        state.running_mean += momentum * mean
        state.running_var *= 1 - momentum
        state.running_var += momentum * var * (n / (n - 1))
    else:
        mean = state.running_mean
        var = state.running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    out = gd * xhat + beta.data.reshape(bshape)

    def fn(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            dx = (inv.reshape(bshape) / n) * (
                n * dxhat - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return _result(out.astype(xd.dtype, copy=False), (x, gamma, beta), fn, "batchnorm1d")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(x.data * pos, (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return _result(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def maxpool1d(x: Tensor, window: int) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool1d expects [B, C, L], got {x.shape}")
    length = x.shape[2]
    if window < 1 or window > length:
        raise ShapeError(f"maxpool1d: window {window} does not fit length {length}")
    out, idx = kernels.maxpool_forward(x.data, window)
    return _result(
        out,
        (x,),
        lambda g: (kernels.maxpool_backward(np.ascontiguousarray(g), idx, window, length),),
        "maxpool1d",
    )


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), fn, "softmax")


def log_softmax_array(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean negative log-likelihood of integer ``target`` under softmax(logits)."""
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != target.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs {target.shape[0]} targets")
    k = logits.shape[1]
    if target.min() < 0 or target.max() >= k:
        raise IndexError(f"cross_entropy: target index out of range [0, {k})")
    bsz = target.shape[0]
    logp = log_softmax_array(logits.data)
    rows = np.arange(bsz)
    loss = np.asarray(-logp[rows, target].mean(), dtype=logits.dtype).reshape(1)

    def fn(g):
        grad = np.exp(logp)
        grad[rows, target] -= 1
        return (grad * (g.reshape(()) / bsz),)

    return _result(loss, (logits,), fn, "cross_entropy")


def binary_cross_entropy(prob: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of probabilities clamped to [1e-7, 1 - 1e-7]."""
    t = np.asarray(target, dtype=prob.dtype).reshape(prob.shape)
    if not np.isin(t, (0, 1)).all():
        raise ValueError("binary_cross_entropy: targets must be 0 or 1")
    p = prob.data
    inside = (p > PROB_CLAMP) & (p < 1 - PROB_CLAMP)
    pc = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    loss = -(t * np.log(pc) + (1 - t) * np.log(1 - pc)).mean()
    loss = np.asarray(loss, dtype=prob.dtype).reshape(1)

    def fn(g):
        grad = (pc - t) / (pc * (1 - pc)) / p.size
        return (grad * inside * g.reshape(()),)

    return _result(loss, (prob,), fn, "binary_cross_entropy")
