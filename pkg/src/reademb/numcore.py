"""Dense float64 tensors with a dynamic reverse-mode tape.

Every operation that produces a tensor from inputs requiring gradients
records a node on the tape (a monotonically increasing sequence number plus
a backward closure).  :func:`backward` collects the nodes reachable from a
scalar loss and replays them in reverse recording order.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ContractError",
    "DimensionError",
    "NumericError",
    "tensor",
    "parameter",
    "matmul",
    "linear",
    "attention",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "transpose",
    "exp",
    "log",
    "relu",
    "sigmoid",
    "clip",
    "sum_all",
    "softmax_rows",
    "layer_norm",
    "cols",
    "concat_cols",
    "reshape",
    "backward",
    "sgd_step",
    "zero_grad",
]

_sequence = itertools.count()


class ContractError(ValueError):
    """An operation was called outside its precondition."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A value became NaN or infinite."""


class Tensor:
    """A float64 array plus optional gradient and tape bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_sequence)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> list[float]:
        """Row-major flat copy of the data."""
        return self.data.ravel().tolist()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = needs
    out.name = None
    out._seq = next(_sequence)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Add ``g`` into ``t.grad``; ``fresh`` marks ``g`` as a new array nobody else holds."""
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
        fresh = True
    if t.grad is None:
        t.grad = g if fresh and g.dtype == np.float64 else np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, g @ bd.T, fresh=True)
        if b.requires_grad:
            _accumulate(b, ad.T @ g, fresh=True)

    return _result(ad @ bd, (a, b), back)


def linear(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` as a single tape node."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data

    def back(g):
        if x.requires_grad:
            _accumulate(x, g @ wd.T, fresh=True)
        if weight.requires_grad:
            _accumulate(weight, xd.T @ g, fresh=True)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0), fresh=True)

    return _result(xd @ wd + bias.data, (x, weight, bias), back)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def back(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def back(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * bd)
        if b.requires_grad:
            _accumulate(b, g * ad)

    return _result(ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NumericError("division by zero")

    def back(g):
        if a.requires_grad:
            _accumulate(a, g / bd)
        if b.requires_grad:
            _accumulate(b, -g * ad / (bd * bd))

    return _result(ad / bd, (a, b), back)


def neg(a) -> Tensor:
    return scale(a, -1.0)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: _accumulate(a, g * c))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _result(a.data.T.copy(), (a,), lambda g: _accumulate(a, g.T))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(old)))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: _accumulate(a, g * out))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: _accumulate(a, g / ad))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    on = a.data > 0
    return _result(np.maximum(a.data, 0.0), (a,), lambda g: _accumulate(a, g * on))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: _accumulate(a, g * out * (1.0 - out)))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: _accumulate(a, g * inside))


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _result(np.array(a.data.sum()), (a,), lambda g: _accumulate(a, np.broadcast_to(g, shape)))


def softmax_rows(x) -> Tensor:
    """Row-wise softmax with max subtraction."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        _accumulate(x, s * (g - (g * s).sum(axis=1, keepdims=True)))

    return _result(s, (x,), back)


def _softmax_last(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention(q, k, v, n_heads: int, key_bias=None) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention over ``n_heads`` column groups.

    ``q``, ``k``, ``v`` are ``[M x d]``; ``key_bias`` is an additive ``[M]``
    logit offset per key (use a large negative value to mask a key).
    Returns the concatenated head outputs ``[M x d]`` and the attention
    weights ``[n_heads x M x M]``.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if not (q.shape == k.shape == v.shape) or q.data.ndim != 2:
        raise DimensionError(f"attention: q/k/v shapes differ {q.shape}, {k.shape}, {v.shape}")
    m, d = q.shape
    if d % n_heads:
        raise DimensionError(f"attention: width {d} not divisible by {n_heads} heads")
    dk = d // n_heads
    s = 1.0 / np.sqrt(dk)

    def split(a):
        return a.reshape(m, n_heads, dk).transpose(1, 0, 2)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    logits = (qh @ kh.transpose(0, 2, 1)) * s
    if key_bias is not None:
        logits = logits + np.asarray(key_bias, dtype=np.float64)[None, None, :]
    w = _softmax_last(logits)
    out = (w @ vh).transpose(1, 0, 2).reshape(m, d)

    def back(g):
        gh = split(g)
        if v.requires_grad:
            _accumulate(v, (w.transpose(0, 2, 1) @ gh).transpose(1, 0, 2).reshape(m, d), fresh=True)
        gw = gh @ vh.transpose(0, 2, 1)
        gl = w * (gw - (gw * w).sum(axis=-1, keepdims=True)) * s
        if q.requires_grad:
            _accumulate(q, (gl @ kh).transpose(1, 0, 2).reshape(m, d), fresh=True)
        if k.requires_grad:
            _accumulate(k, (gl.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(m, d), fresh=True)

    return _result(out, (q, k, v), back), w


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean and unit (population) variance, then scale and shift."""
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.data.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(
            f"layer_norm: x {x.shape} needs gain/bias of shape ({x.shape[-1]},), "
            f"got {gain.shape} and {bias.shape}"
        )
    d = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))
        if x.requires_grad:
            gh = g * gd
            dx = inv * (gh - gh.mean(axis=1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=1, keepdims=True) / d)
            _accumulate(x, dx)

    return _result(xhat * gd + bias.data, (x, gain, bias), back)


def cols(a, start: int, stop: int) -> Tensor:
    """Column slice ``a[:, start:stop]``."""
    a = _as_tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        _accumulate(a, full)

    return _result(a.data[:, start:stop].copy(), (a,), back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        for p, lo, hi in zip(parts, edges[:-1], edges[1:]):
            _accumulate(p, g[:, lo:hi])

    return _result(np.concatenate([p.data for p in parts], axis=1), parts, back)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every gradient-requiring tensor that feeds ``loss``.

    Gradients accumulate into existing buffers; call :func:`zero_grad` (or
    :func:`sgd_step`, which zeroes after updating) between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    # parents are always recorded before children, so descending sequence
    # numbers are a valid reverse topological order
    loss.grad = np.ones_like(loss.data)
    for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
        if t._backward is None:
            continue
        g, t.grad = t.grad, None
        if g is not None:
            t._backward(g)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """In-place ``p -= lr * grad`` followed by clearing the gradients."""
    if not lr > 0:
        raise ContractError(f"sgd_step: lr must be positive, got {lr}")
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError(f"sgd_step: parameter {p.name or p.shape} has no gradient")
    for p in params:
        g = p.grad
        g *= lr
        p.data -= g
        p.grad = None
