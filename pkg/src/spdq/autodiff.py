"""Minimal reverse-mode automatic differentiation on numpy arrays.

Values live in float32; matmuls and reductions accumulate in float64 before
casting back, which keeps finite-difference checks of the gradients stable.
Operations record onto a global tape while gradients are enabled, and
``backward`` replays the tape once in reverse insertion order. The engine is
single threaded: one training loop owns the tape at a time, and forward-only
work (evaluation, calibration captures, teacher passes) should run under
``no_grad()`` so nothing is recorded.

Broadcasting is deliberately narrow. Elementwise ops accept operands of equal
shape, a scalar on either side, a trailing-shape operand broadcast over the
leading batch dimension (bias addition), or a last-axis singleton (row
normalization). Anything else raises ``ShapeError``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AdamW",
    "ShapeError",
    "Tensor",
    "add",
    "backward",
    "clamp_min",
    "concat",
    "custom_op",
    "div",
    "gelu",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "softmax",
    "sub",
    "tape_size",
    "tensor_sum",
    "transpose",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not fit an operation's contract."""


class Tensor:
    """A float32 numpy array plus gradient bookkeeping.

    ``requires_grad`` marks leaves that should receive ``.grad`` after a
    backward pass; tensors produced by ops inherit it from their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Operator sugar; every path goes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class _Node:
    """One recorded op: its output, inputs, and the gradient rule."""

    __slots__ = ("op", "out", "inputs", "backward_fn")

    def __init__(self, op: str, out: Tensor, inputs: Sequence[Tensor],
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.out = out
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


_TAPE: list[_Node] = []
_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def tape_size() -> int:
    return len(_TAPE)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _record(op: str, out: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE.append(_Node(op, out, inputs, backward_fn))


def custom_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Build an output tensor for an externally computed op and record it.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input. This is the hook used by the quantizer to register its
    straight-through estimator without the engine knowing about it.
    """
    out = Tensor(out_data)
    _record(op, out, inputs, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every reachable
    requires_grad tensor, then clear the tape.

    The tape is consumed: a second backward needs the graph rebuilt.
    """
    global _TAPE
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes, _TAPE = _TAPE, []

    grad_of: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(nodes):
        g = grad_of.get(id(node.out))
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = gi.astype(np.float32, copy=False)
            if gi.shape != t.data.shape:
                raise ShapeError(
                    f"{node.op} backward produced gradient shape {gi.shape} "
                    f"for input shape {t.data.shape}")
            key = id(t)
            holders[key] = t
            acc = grad_of.get(key)
            grad_of[key] = gi if acc is None else acc + gi

    for key, g in grad_of.items():
        t = holders[key]
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.astype(np.float32, copy=False)


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    big, small = (sa, sb) if len(sa) >= len(sb) else (sb, sa)
    if big[len(big) - len(small):] == small:
        return  # trailing shape broadcast over leading batch dims
    if len(sa) == len(sb) and sa[:-1] == sb[:-1] and 1 in (sa[-1], sb[-1]):
        return  # last-axis singleton, e.g. row sums against rows
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _elementwise(op: str, a, b, fwd, bwd_a, bwd_b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(op, a, b)
    out = Tensor(fwd(a.data, b.data))

    def backward_fn(g):
        return (_unbroadcast(bwd_a(g, a.data, b.data), a.data.shape),
                _unbroadcast(bwd_b(g, a.data, b.data), b.data.shape))

    _record(op, out, (a, b), backward_fn)
    return out


def add(a, b) -> Tensor:
    return _elementwise("add", a, b, lambda x, y: x + y,
                        lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _elementwise("sub", a, b, lambda x, y: x - y,
                        lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _elementwise("mul", a, b, lambda x, y: x * y,
                        lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _elementwise("div", a, b, lambda x, y: x / y,
                        lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def matmul(a, b) -> Tensor:
    """2-d by 2-d matrix product, accumulated in float64."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out = Tensor((a64 @ b64).astype(np.float32))

    def backward_fn(g):
        g64 = g.astype(np.float64)
        return ((g64 @ b64.T).astype(np.float32), (a64.T @ g64).astype(np.float32))

    _record("matmul", out, (a, b), backward_fn)
    return out


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0.0

    def backward_fn(g):
        return (g * mask,)

    _record("relu", out, (x,), backward_fn)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = _as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * xd * (1.0 + t))

    def backward_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        dgelu = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * dinner
        return (g * dgelu,)

    _record("gelu", out, (x,), backward_fn)
    return out


def clamp_min(x, floor: float) -> Tensor:
    """Elementwise max(x, floor); gradient is zero where the floor binds."""
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, floor))
    mask = x.data > floor

    def backward_fn(g):
        return (g * mask,)

    _record("clamp_min", out, (x,), backward_fn)
    return out


def log(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.log(x.data))

    def backward_fn(g):
        return (g / x.data,)

    _record("log", out, (x,), backward_fn)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted.astype(np.float64))
    p = (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)
    out = Tensor(p)

    def backward_fn(g):
        dot = np.sum(g * p, axis=axis, keepdims=True)
        return (p * (g - dot),)

    _record("softmax", out, (x,), backward_fn)
    return out


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = (x.data - np.max(x.data, axis=axis, keepdims=True)).astype(np.float64)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = Tensor((shifted - lse).astype(np.float32))
    p = np.exp(shifted - lse).astype(np.float32)

    def backward_fn(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    _record("log_softmax", out, (x,), backward_fn)
    return out


def tensor_sum(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64))

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, x.data.shape).copy(),)

    _record("sum", out, (x,), backward_fn)
    return out


def mean(x) -> Tensor:
    """Mean over every element."""
    x = _as_tensor(x)
    if x.size == 0:
        raise ShapeError("mean of an empty tensor")
    out = Tensor(np.mean(x.data, dtype=np.float64))

    def backward_fn(g):
        return (np.broadcast_to(g / x.size, x.data.shape).copy(),)

    _record("mean", out, (x,), backward_fn)
    return out


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = Tensor(x.data.reshape(shape))

    def backward_fn(g):
        return (g.reshape(x.data.shape),)

    _record("reshape", out, (x,), backward_fn)
    return out


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-d tensor, got {x.shape}")
    out = Tensor(x.data.T)

    def backward_fn(g):
        return (np.ascontiguousarray(g.T),)

    _record("transpose", out, (x,), backward_fn)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    nd = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != nd:
            raise ShapeError(f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    widths = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def backward_fn(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    _record("concat", out, tensors, backward_fn)
    return out


class AdamW(object):
    """Adam with decoupled weight decay over named parameters.

    ``step`` applies one update from the accumulated ``.grad`` fields and
    clears them; a parameter without a gradient is an error, not a no-op.
    """

    def __init__(self, params: Iterable[tuple[str, Tensor]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        if not self.params:
            raise ValueError("AdamW needs at least one parameter")
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is None:
                raise ValueError(f"AdamW.step: parameter {name!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params:
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= np.float32(self.lr) * update.astype(np.float32)
            p.grad = None
