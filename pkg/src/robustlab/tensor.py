"""Dense f64 tensors with reverse-mode autodiff.

Each op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. Node ids increase
monotonically, so sorting the reachable graph by id (descending) gives a
reverse topological order; that sorted list is the tape replayed by
:func:`backward`.

Every primitive also reports its cost to an optional :class:`FlopCounter`
(see :func:`count_flops`). Matmul-like ops report their true multiply-adds
(two FLOPs each) in both directions; per-element ops report the fixed
constants in :data:`ELEMENTWISE_FLOPS`, with backward charged at twice the
forward constant.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels

_ids = itertools.count()

#: forward FLOPs per element for the non-matmul primitives
ELEMENTWISE_FLOPS = {
    "add": 1,
    "mul": 1,
    "relu": 1,
    "gelu": 8,
    "batchnorm": 4,
    "avgpool": 1,
    "log": 1,
    "softmax": 5,
    "cross_entropy": 5,
    "kl": 4,
    "sum": 1,
}
BACKWARD_MULTIPLIER = 2

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


@dataclass
class FlopCounter:
    mac_flops: int = 0
    elementwise_flops: int = 0
    paused: bool = False

    @property
    def total(self) -> int:
        return self.mac_flops + self.elementwise_flops


_counter: contextvars.ContextVar[FlopCounter | None] = contextvars.ContextVar("robustlab_flops", default=None)


@contextlib.contextmanager
def count_flops():
    """Count FLOPs executed by tensor primitives inside the block."""
    fc = FlopCounter()
    token = _counter.set(fc)
    try:
        yield fc
    finally:
        _counter.reset(token)


@contextlib.contextmanager
def flops_paused():
    """Exclude the block from the active counter (validation passes)."""
    fc = _counter.get()
    if fc is None:
        yield
        return
    prev = fc.paused
    fc.paused = True
    try:
        yield
    finally:
        fc.paused = prev


def _tally(mac: int = 0, elem: int = 0) -> None:
    fc = _counter.get()
    if fc is not None and not fc.paused:
        fc.mac_flops += int(mac)
        fc.elementwise_flops += int(elem)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._id = next(_ids)
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _elem(name: str, n: int, backward: bool = False) -> None:
    c = ELEMENTWISE_FLOPS[name]
    _tally(elem=c * n * (BACKWARD_MULTIPLIER if backward else 1))


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _broadcast_check(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    out = a.data + b.data
    _elem("add", out.size)

    def bw(g):
        _elem("add", g.size, True)
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    out = a.data - b.data
    _elem("add", out.size)

    def bw(g):
        _elem("add", g.size, True)
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    out = a.data * b.data
    _elem("mul", out.size)

    def bw(g):
        _elem("mul", g.size, True)
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    _elem("relu", x.size)

    def bw(g):
        _elem("relu", g.size, True)
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), bw, "relu")


def gelu(x) -> Tensor:
    """tanh-approximate GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = as_tensor(x)
    v = x.data
    t = np.tanh(GELU_C * (v + GELU_A * v**3))
    _elem("gelu", x.size)

    def bw(g):
        _elem("gelu", g.size, True)
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        return (g * d,)

    return _make(0.5 * v * (1.0 + t), (x,), bw, "gelu")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: input has nonpositive entries")
    _elem("log", x.size)

    def bw(g):
        _elem("log", g.size, True)
        return (g / x.data,)

    return _make(np.log(x.data), (x,), bw, "log")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    _elem("sum", x.size)

    def bw(g):
        _elem("sum", x.size, True)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(x.data.sum(axis=axis), (x,), bw, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


# ---------------------------------------------------------------------------
# matmul / conv
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """2-D matrix product. Backward always forms both operand gradients."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    _tally(mac=2 * m * k * n)

    def bw(g):
        _tally(mac=4 * m * k * n)
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """NCHW convolution (no bias) via im2col + matmul."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2] != w.shape[3] or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    n, c, h, wd = x.shape
    c_out, _, k, _ = w.shape
    ho, wo = _kernels.conv_out_size(h, k, stride, pad), _kernels.conv_out_size(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {k} with pad {pad} does not fit input {x.shape}")
    cols = _kernels.im2col(x.data, k, stride, pad)
    wmat = w.data.reshape(c_out, -1)
    macs = cols.shape[0] * cols.shape[1] * c_out
    _tally(mac=2 * macs)
    out = (cols @ wmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    def bw(g):
        _tally(mac=4 * macs)
        gm = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (gm.T @ cols).reshape(w.shape)
        gx = _kernels.col2im(gm @ wmat, x.shape, k, stride, pad)
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, w), bw, "conv2d")


# ---------------------------------------------------------------------------
# normalization / pooling
# ---------------------------------------------------------------------------


def batchnorm(x, gamma, beta, running_mean, running_var, training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch norm over (N, C) or (N, C, H, W) inputs.

    ``training=True`` normalizes with batch statistics and updates the
    running buffers in place; ``training=False`` is the frozen mode that uses
    the running buffers and leaves them untouched.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim not in (2, 4) or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(f"batchnorm: input {x.shape} incompatible with affine {gamma.shape}/{beta.shape}")
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) + (1,) * (x.data.ndim - 2)
    _elem("batchnorm", x.size)
    if training:
        m = x.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        _elem("batchnorm", g.size, True)
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            m = x.size // x.shape[1]
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat - gxhat.sum(axis=axes).reshape(bshape) - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "batchnorm")


def avgpool(x) -> Tensor:
    """Global average pool (N, C, H, W) -> (N, C)."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"avgpool: expected NCHW input, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    _elem("avgpool", x.size)

    def bw(g):
        _elem("avgpool", x.size, True)
        return (np.broadcast_to((g / hw)[:, :, None, None], x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), bw, "avgpool")


# ---------------------------------------------------------------------------
# probabilities and losses
# ---------------------------------------------------------------------------


def _stable_softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x, floor: float | None = None) -> Tensor:
    """Row softmax over the last axis, optionally floored (for KL inputs).

    Floored entries carry zero gradient.
    """
    x = as_tensor(x)
    p = _stable_softmax(x.data)
    out = p if floor is None else np.maximum(p, floor)
    live = None if floor is None else p >= floor
    _elem("softmax", x.size)

    def bw(g):
        _elem("softmax", x.size, True)
        if live is not None:
            g = g * live
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    _elem("softmax", x.size)

    def bw(g):
        _elem("softmax", x.size, True)
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of (N, C) logits against integer labels."""
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or y.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} incompatible with labels {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise ValueError("cross_entropy: label out of range")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    per = lse - z[np.arange(n), y]
    _elem("cross_entropy", logits.size)
    if reduction == "none":
        out = per
    elif reduction == "sum":
        out = per.sum()
    elif reduction == "mean":
        out = per.mean()
    else:
        raise ValueError(f"cross_entropy: unknown reduction {reduction!r}")

    def bw(g):
        _elem("cross_entropy", logits.size, True)
        p = _stable_softmax(logits.data)
        p[np.arange(n), y] -= 1.0
        if reduction == "none":
            scale = g[:, None]
        elif reduction == "sum":
            scale = g
        else:
            scale = g / n
        return (p * scale,)

    return _make(np.asarray(out), (logits,), bw, "cross_entropy")


def kl_divergence(p, q, reduction: str = "mean") -> Tensor:
    """Row-wise KL(p || q) = sum p log(p / q), averaged over the batch.

    Both inputs must be strictly positive; callers clamp (see ``softmax``'s
    ``floor``). ``reduction="none"`` returns the per-row values.
    """
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence: shape mismatch {p.shape} vs {q.shape}")
    if np.any(p.data <= 0) or np.any(q.data <= 0):
        raise ValueError("kl_divergence: inputs must be strictly positive (clamp probabilities first)")
    lr = np.log(p.data) - np.log(q.data)
    per = (p.data * lr).sum(axis=-1)
    n = per.size
    _elem("kl", p.size)
    if reduction == "none":
        out = per
    elif reduction == "sum":
        out = per.sum()
    elif reduction == "mean":
        out = per.mean()
    else:
        raise ValueError(f"kl_divergence: unknown reduction {reduction!r}")

    def bw(g):
        _elem("kl", p.size, True)
        if reduction == "none":
            s = g[..., None]
        elif reduction == "sum":
            s = g
        else:
            s = g / n
        return (lr + 1.0) * s, -(p.data / q.data) * s

    return _make(np.asarray(out), (p, q), bw, "kl")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, in reverse topological order."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen or not t.requires_grad:
            continue
        seen[t._id] = t
        stack.extend(t._parents)
    return [seen[i] for i in sorted(seen, reverse=True)]


def _run(loss: Tensor) -> dict[int, np.ndarray]:
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ValueError(f"backward: loss must be a scalar tensor, got shape {shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in tape(loss):
        g = grads.get(node._id)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
    return grads


def backward(loss: Tensor) -> None:
    """Set ``.grad`` on every tensor in the graph that requires grad.

    Gradients are assigned, not accumulated, so replaying the same graph
    gives identical results.
    """
    grads = _run(loss)
    for node in tape(loss):
        g = grads.get(node._id)
        node.grad = np.zeros_like(node.data) if g is None else np.asarray(g).reshape(node.shape)


def grad(loss: Tensor, wrt: list[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``wrt`` without touching ``.grad``."""
    grads = _run(loss)
    return [np.asarray(grads[t._id]).reshape(t.shape) if t._id in grads else np.zeros_like(t.data) for t in wrt]
