"""Dense tensors with reverse-mode automatic differentiation.

Every op records its inputs and a closure that maps the output gradient to
input gradients. ``Tensor.backward`` walks the recorded graph in reverse
topological order and accumulates gradients into trainable leaves.

Broadcasting is restricted to leading-axis expansion: the two operand shapes
must be equal, or one must be a suffix of the other (scalars included).
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_state = {"dtype": np.dtype(np.float32), "grad": True}
_node_ids = itertools.count()


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def float64_mode():
    """Create tensors in 64-bit precision inside the block (gradient checks)."""
    previous = _state["dtype"]
    _state["dtype"] = np.dtype(np.float64)
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    previous = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = previous


def is_grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    """An n-dimensional float array that participates in an autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _state["dtype"])
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every trainable leaf reachable from this scalar.

        Calling it twice on the same graph accumulates twice.
        """
        if self.data.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        pending = {self.node_id: np.ones_like(self.data)}
        for node in reversed(_topological_order(self)):
            g = pending.pop(node.node_id, None)
            if g is None:
                continue
            if node._backward is None:
                g = np.asarray(g, dtype=node.data.dtype)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node_id in pending:
                    pending[parent.node_id] = pending[parent.node_id] + pg
                else:
                    pending[parent.node_id] = pg

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.node_id not in seen:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_node_ids)
    out.op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _lift(a, b):
    """Wrap plain numbers so they match the dtype of the tensor operand."""
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    return a, b


def _check_broadcast(op: str, a: tuple, b: tuple) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {a} and {b} are incompatible")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


# -- element-wise binary ops ------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast("add", a.shape, b.shape)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast("sub", a.shape, b.shape)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast("mul", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    _check_broadcast("div", a.shape, b.shape)

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


# -- matrix product ---------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``b`` 2-D: ``a`` is ``[..., k]`` and the product applies to the last axis.
    ``b`` with rank > 2: both operands share leading batch axes.
    """
    if a.ndim == 0 or b.ndim < 2:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    if b.ndim == 2:
        k, n = b.shape
        if a.shape[-1] != k:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

        def backward(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

        return _result(a.data @ b.data, (a, b), backward, "matmul")

    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


# -- element-wise unary ops -------------------------------------------------
def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style expansion; the gradient is summed back."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from exc
    lead = len(shape) - a.ndim
    expanded = tuple(i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        if expanded:
            g = g.sum(axis=expanded, keepdims=True)
        return (g,)

    return _result(out, (a,), backward, "broadcast_to")


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; ``mask`` broadcasts numpy-style."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    return _result(out, (a,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


# -- reductions and normalizers ---------------------------------------------
def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _result(np.asarray(out, dtype=a.dtype), (a,),
                   lambda g: (_expand_reduced(g, a.shape, axis, keepdims),), "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(count))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    z = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(z) * np.sum(g, axis=axis, keepdims=True),)

    return _result(z, (a,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} with gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gxhat = g * gain.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return _result(out, (x, gain, bias), backward, "layer_norm")


def cross_entropy(logits: Tensor, targets, ignore_id: int | None = None,
                  smoothing: float = 0.0) -> Tensor:
    """Mean (optionally label-smoothed) negative log-likelihood of ``targets``.

    ``logits`` is ``[..., V]`` and ``targets`` matches its leading axes.
    Positions equal to ``ignore_id`` are excluded; if nothing remains the
    loss is 0 with a zero gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    flat_logits = logits.data.reshape(-1, vocab)
    flat_t = targets.reshape(-1)
    valid = np.ones_like(flat_t, dtype=bool) if ignore_id is None else flat_t != ignore_id
    bad = valid & ((flat_t < 0) | (flat_t >= vocab))
    if bad.any():
        raise IndexError(f"cross_entropy: target {int(flat_t[bad][0])} outside [0, {vocab})")
    count = int(valid.sum())
    dtype = logits.dtype
    if count == 0:
        return _result(np.zeros((), dtype=dtype), (logits,),
                       lambda g: (np.zeros_like(logits.data),), "cross_entropy")

    shifted = flat_logits - flat_logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.nonzero(valid)[0]
    q = np.zeros_like(flat_logits)
    q[rows] = smoothing / vocab
    q[rows, flat_t[rows]] += 1.0 - smoothing
    loss = -(q * logp).sum() / count

    def backward(g):
        grad = (np.exp(logp) * valid[:, None] - q) * (g / count)
        return (grad.reshape(logits.shape),)

    return _result(np.asarray(loss, dtype=dtype), (logits,), backward, "cross_entropy")


# -- shape manipulation -----------------------------------------------------
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _result(np.swapaxes(a.data, ax1, ax2), (a,),
                   lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def _is_advanced(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    advanced = _is_advanced(index)

    def backward(g):
        grad = np.zeros_like(a.data)
        if advanced:
            np.add.at(grad, index, g)
        else:
            grad[index] += g
        return (grad,)

    return _result(a.data[index], (a,), backward, "getitem")


def embedding(weight: Tensor, ids) -> Tensor:
    """Rows of ``weight`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: id outside [0, {weight.shape[0]})")
    return getitem(weight, ids)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}") from exc
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {[t.shape for t in tensors]}") from exc

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tuple(tensors), backward, "stack")


# -- gradient checking --------------------------------------------------------
def numerical_grad(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` w.r.t. ``tensor``."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = fn().item()
            flat[i] = orig - h
            minus = fn().item()
            flat[i] = orig
            out[i] = (plus - minus) / (2.0 * h)
    return grad


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-3,
              rtol: float = 1e-3, atol: float = 1e-6) -> bool:
    """Compare autodiff gradients of ``fn()`` with central differences.

    All checked tensors must be 64-bit. Raises ``AssertionError`` naming the
    first tensor whose gradient disagrees.
    """
    for t in tensors:
        if t.dtype != np.float64:
            raise ContractError("gradcheck requires float64 tensors")
        t.grad = None
    fn().backward()
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(fn, t, h)
        err = np.abs(analytic - numeric)
        limit = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
        if not np.all(err <= limit):
            worst = int(np.argmax(err - limit))
            raise AssertionError(
                f"gradient mismatch on input {i} {t.shape}: analytic "
                f"{analytic.reshape(-1)[worst]:.6g} vs numeric {numeric.reshape(-1)[worst]:.6g}")
    return True
