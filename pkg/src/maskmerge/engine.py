"""Dense float64 tensors with a reverse-mode gradient tape and Adam.

Values are eager numpy arrays; when an operand is gradient-tracked, the
producing op appends a backward rule to the owning :class:`GradTape`.
Broadcasting is deliberately restricted to scalar-vs-tensor and identical
shapes so every backward rule stays hand-checkable. Everything is 64-bit.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "AdamState",
    "adam_step",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sigmoid",
    "exp",
    "log",
    "clamped_log",
    "relu",
    "tensor_sum",
    "tensor_mean",
    "softmax",
    "log_softmax",
    "reshape",
    "narrow",
    "concat",
    "add_n",
    "sigmoid_values",
    "softmax_values",
]

_uid_counter = itertools.count(1)

# backward rule: receives d(loss)/d(out) and returns d(loss)/d(parent)
_Pull = Callable[[np.ndarray], np.ndarray]


class Tensor:
    """Immutable dense array node, optionally tracked on a GradTape."""

    __slots__ = ("data", "requires_grad", "uid", "tape")

    def __init__(self, data, requires_grad: bool = False, tape: "GradTape | None" = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor data contains NaN or Inf")
        if requires_grad and tape is None:
            raise ContractError("a gradient-tracked leaf must be attached to a GradTape")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.uid = next(_uid_counter)
        self.tape = tape
        if requires_grad:
            tape._register_leaf(self)

    @classmethod
    def _from_op(cls, data: np.ndarray, tape: "GradTape | None", requires_grad: bool) -> "Tensor":
        out = object.__new__(cls)
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("operation produced NaN or Inf")
        if arr.base is not None or not arr.flags.owndata:
            arr = arr.copy()
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.uid = next(_uid_counter)
        out.tape = tape if requires_grad else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def sum(self, axis: int | None = None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return tensor_mean(self, axis)

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

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"


class GradTape:
    """Execution-ordered op record for one reverse-mode pass.

    A tape is single-owner: tensors from different tapes must not be mixed.
    ``gradients`` is a pure walk over the record, so it may be called more
    than once (e.g. once for an inner-loop parameter and once for the outer
    parameters of the same graph) and always returns fresh arrays.
    """

    def __init__(self):
        self._nodes: list[tuple[int, tuple[tuple[int, _Pull], ...]]] = []
        self._leaves: list[Tensor] = []

    def leaf(self, data) -> Tensor:
        return Tensor(data, requires_grad=True, tape=self)

    def _register_leaf(self, t: Tensor) -> None:
        self._leaves.append(t)

    def _record(self, out_uid: int, pulls: tuple[tuple[int, _Pull], ...]) -> None:
        self._nodes.append((out_uid, pulls))

    def __len__(self) -> int:
        return len(self._nodes)

    def gradients(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Backpropagate from a scalar loss; returns uid -> gradient for every leaf.

        Leaves unreachable from the loss get zero gradients.
        """
        if loss.ndim != 0:
            raise ContractError(f"loss must be a scalar tensor, got shape {loss.shape}")
        if loss.tape is not self:
            raise ContractError("loss tensor does not belong to this tape")
        if not self._nodes:
            raise ContractError("tape is empty, nothing to backpropagate")
        grads: dict[int, np.ndarray] = {loss.uid: np.ones((), dtype=np.float64)}
        for out_uid, pulls in reversed(self._nodes):
            g = grads.get(out_uid)
            if g is None:
                continue
            for parent_uid, pull in pulls:
                contrib = pull(g)
                acc = grads.get(parent_uid)
                grads[parent_uid] = contrib if acc is None else acc + contrib
        result: dict[int, np.ndarray] = {}
        for t in self._leaves:
            result[t.uid] = grads.get(t.uid, np.zeros(t.shape))
        return result

    def gradient(self, loss: Tensor, wrt: Tensor) -> np.ndarray:
        return self.gradients(loss)[wrt.uid]


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer, np.ndarray, list, tuple)):
        return Tensor(x)
    raise TypeError(f"cannot treat {type(x).__name__} as a tensor")


def _owner_tape(*operands: Tensor) -> "GradTape | None":
    tape = None
    for t in operands:
        if t.requires_grad:
            if tape is not None and tape is not t.tape:
                raise ContractError("operands belong to different tapes")
            tape = t.tape
    return tape


def _emit(data: np.ndarray, parents: Sequence[tuple[Tensor, _Pull]]) -> Tensor:
    tracked = [(p, pull) for p, pull in parents if p.requires_grad]
    tape = _owner_tape(*[p for p, _ in parents])
    out = Tensor._from_op(data, tape, bool(tracked))
    if tracked:
        tape._record(out.uid, tuple((p.uid, pull) for p, pull in tracked))
    return out


def _elementwise_shape(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(f"shapes {a.shape} and {b.shape} are neither equal nor scalar-broadcastable")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # only possible mismatch under the restricted broadcasting: parent is scalar
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _elementwise_shape(a, b)
    return _emit(a.data + b.data, [
        (a, lambda g: _reduce_to(g, a.shape)),
        (b, lambda g: _reduce_to(g, b.shape)),
    ])


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _elementwise_shape(a, b)
    return _emit(a.data - b.data, [
        (a, lambda g: _reduce_to(g, a.shape)),
        (b, lambda g: _reduce_to(-g, b.shape)),
    ])


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _elementwise_shape(a, b)
    av, bv = a.data, b.data
    return _emit(av * bv, [
        (a, lambda g: _reduce_to(g * bv, a.shape)),
        (b, lambda g: _reduce_to(g * av, b.shape)),
    ])


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _elementwise_shape(a, b)
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    av, bv = a.data, b.data
    return _emit(av / bv, [
        (a, lambda g: _reduce_to(g / bv, a.shape)),
        (b, lambda g: _reduce_to(-g * av / (bv * bv), b.shape)),
    ])


def neg(a) -> Tensor:
    a = _wrap(a)
    return _emit(-a.data, [(a, lambda g: -g)])


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    av, bv = a.data, b.data
    return _emit(av @ bv, [
        (a, lambda g: g @ bv.T),
        (b, lambda g: av.T @ g),
    ])


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on plain arrays."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    y = sigmoid_values(a.data)
    return _emit(y, [(a, lambda g: g * y * (1.0 - y))])


def exp(a) -> Tensor:
    a = _wrap(a)
    y = np.exp(a.data)
    return _emit(y, [(a, lambda g: g * y)])


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive value")
    av = a.data
    return _emit(np.log(av), [(a, lambda g: g / av)])


def clamped_log(a, eps: float = 1e-12) -> Tensor:
    """log(max(a, eps)); gradient is zero on the clamped region."""
    a = _wrap(a)
    av = a.data
    clamped = np.maximum(av, eps)
    return _emit(np.log(clamped), [
        (a, lambda g: np.where(av >= eps, g / clamped, 0.0)),
    ])


def relu(a) -> Tensor:
    a = _wrap(a)
    av = a.data
    return _emit(np.maximum(av, 0.0), [(a, lambda g: g * (av > 0.0))])


def _check_axis(axis: int | None, ndim: int) -> int | None:
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-D tensor")
    return axis % ndim


def _unreduce(g: np.ndarray, shape: tuple[int, ...], axis: int | None) -> np.ndarray:
    if axis is None:
        return np.full(shape, g, dtype=np.float64)
    return np.broadcast_to(np.expand_dims(g, axis), shape).copy()


def tensor_sum(a, axis: int | None = None) -> Tensor:
    a = _wrap(a)
    if a.size == 0:
        raise DomainError("reduction over an empty tensor")
    axis = _check_axis(axis, a.ndim)
    shape = a.shape
    return _emit(np.sum(a.data, axis=axis), [
        (a, lambda g: _unreduce(g, shape, axis)),
    ])


def tensor_mean(a, axis: int | None = None) -> Tensor:
    a = _wrap(a)
    if a.size == 0:
        raise DomainError("reduction over an empty tensor")
    axis = _check_axis(axis, a.ndim)
    shape = a.shape
    count = a.size if axis is None else shape[axis]
    return _emit(np.mean(a.data, axis=axis), [
        (a, lambda g: _unreduce(g, shape, axis) / count),
    ])


def softmax_values(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax on plain arrays."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    if a.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    ax = _check_axis(axis, a.ndim)
    y = softmax_values(a.data, axis=ax)

    def pull(g, y=y, ax=ax):
        return y * (g - np.sum(g * y, axis=ax, keepdims=True))

    return _emit(y, [(a, pull)])


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    if a.ndim == 0:
        raise ShapeError("log_softmax needs at least one axis")
    ax = _check_axis(axis, a.ndim)
    shifted = a.data - np.max(a.data, axis=ax, keepdims=True)
    z = shifted - np.log(np.sum(np.exp(shifted), axis=ax, keepdims=True))

    def pull(g, z=z, ax=ax):
        return g - np.exp(z) * np.sum(g, axis=ax, keepdims=True)

    return _emit(z, [(a, pull)])


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _wrap(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}")
    old = a.shape
    return _emit(a.data.reshape(shape), [(a, lambda g: g.reshape(old))])


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = _wrap(a)
    ax = _check_axis(axis, a.ndim)
    if ax is None:
        raise ShapeError("narrow needs an explicit axis")
    if start < 0 or length <= 0 or start + length > a.shape[ax]:
        raise ShapeError(
            f"narrow window [{start}, {start + length}) out of range for axis {ax} of {a.shape}"
        )
    index = tuple(slice(None) if i != ax else slice(start, start + length) for i in range(a.ndim))
    parent_shape = a.shape

    def pull(g, index=index, parent_shape=parent_shape):
        out = np.zeros(parent_shape, dtype=np.float64)
        out[index] = g
        return out

    return _emit(a.data[index], [(a, pull)])


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty sequence")
    ax = _check_axis(axis, parts[0].ndim)
    try:
        data = np.concatenate([p.data for p in parts], axis=ax)
    except ValueError as e:
        raise ShapeError(f"concat shapes incompatible: {[p.shape for p in parts]}") from e
    offsets = np.cumsum([0] + [p.shape[ax] for p in parts])
    pulls = []
    for i, p in enumerate(parts):
        index = tuple(
            slice(None) if d != ax else slice(int(offsets[i]), int(offsets[i + 1]))
            for d in range(p.ndim)
        )
        pulls.append((p, lambda g, index=index: g[index]))
    return _emit(data, pulls)


def add_n(tensors: Sequence) -> Tensor:
    """Left-to-right sum of a nonempty sequence (fixed association order)."""
    ts = list(tensors)
    if not ts:
        raise ShapeError("add_n of an empty sequence")
    acc = _wrap(ts[0])
    for t in ts[1:]:
        acc = add(acc, t)
    return acc


@dataclass
class AdamState:
    """Adam optimizer state for a named set of parameter arrays."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; mutates state, returns new params."""
    for key, p in params.items():
        g = grads[key]
        if np.shape(g) != np.shape(p):
            raise ShapeError(f"gradient shape {np.shape(g)} != param shape {np.shape(p)} for '{key}'")
        if key in state.first_moment and state.first_moment[key].shape != np.shape(p):
            raise ShapeError(f"Adam accumulator shape mismatch for '{key}'")
    state.step_count += 1
    t = state.step_count
    updated: dict[str, np.ndarray] = {}
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        m = state.first_moment.get(key)
        v = state.second_moment.get(key)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[key] = m
        state.second_moment[key] = v
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        updated[key] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated
