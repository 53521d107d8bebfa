"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of primitives the mapper network needs are provided. Every
primitive applied while a :class:`Tape` is active, and with at least one
input that requires a gradient, appends a node to that tape. ``backward``
replays the tape in reverse once; a second call on the same tape without
``reset`` raises :class:`TapeError`.

    >>> w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape():
    ...     loss = (w * w).sum()
    ...     backward(loss)
    >>> w.grad.tolist()
    [2.0, 4.0, 6.0]
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "NonFiniteError",
    "TapeError",
    "Tensor",
    "Tape",
    "Stream",
    "backward",
    "matmul",
    "elementwise",
    "gaussian_sample",
    "add",
    "sub",
    "mul",
    "neg",
    "sin",
    "relu",
    "sigmoid",
    "softplus",
    "log",
    "exp",
    "clip",
    "transpose",
    "reshape",
    "tsum",
    "tmean",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """A tensor would contain NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of the computation tape (double backward, non-scalar loss, ...)."""


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")
    return arr


class Tensor:
    """Row-major float64 array with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = _check_finite(arr, "tensor construction")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: _Node | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._node = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)


@dataclass(eq=False)
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives executed inside the ``with`` block are
    recorded here. Tapes nest, the innermost one wins.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def record(self, node: _Node) -> None:
        if self.consumed:
            raise TapeError("tape already replayed; call reset() before recording again")
        self.nodes.append(node)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(name: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    result = Tensor._wrap(_check_finite(out, name))
    if _ACTIVE and any(t.requires_grad for t in inputs):
        tape = _ACTIVE[-1]
        result.requires_grad = True
        node = _Node(result, inputs, vjp, name)
        result._node = node
        result._tape = tape
        tape.record(node)
    return result


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on the tape.

    Leaves that were recorded on the tape but do not influence ``loss`` get a
    zero gradient.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced by taped operations")
    if tape.consumed:
        raise TapeError("backward called twice on the same tape without reset()")
    tape.consumed = True

    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = adj.pop(id(node.out), None)
        for t in node.inputs:
            if t.requires_grad and t.is_leaf:
                leaves[id(t)] = t
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t)
                adj[key] = gi if key not in adj else adj[key] + gi
    for t in leaves.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


# ----------------------------------------------------------------------------
# primitives


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and not _is_scalar(a) and not _is_scalar(b):
        raise DimensionError(f"{name}: cannot broadcast {list(a.shape)} with {list(b.shape)}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum())


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _emit(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("sin", np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _stable_sigmoid(a.data)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a) -> Tensor:
    """log(1 + e^x), evaluated as max(x, 0) + log1p(e^-|x|)."""
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return _emit("softplus", out, (a,), lambda g: (g * _stable_sigmoid(a.data),))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log of a non-positive value")
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


_UNARY = {
    "sin": sin,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "log": log,
    "exp": exp,
}
_BINARY = {"add": add, "mul": mul}


def elementwise(op: str, *inputs) -> Tensor:
    """Dispatch one of add, mul, sin, relu, sigmoid, softplus, log, exp by name."""
    if op in _BINARY:
        if len(inputs) != 2:
            raise TypeError(f"{op} takes two inputs")
        return _BINARY[op](*inputs)
    if op in _UNARY:
        if len(inputs) != 1:
            raise TypeError(f"{op} takes one input")
        return _UNARY[op](inputs[0])
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {list(a.shape)} x {list(b.shape)}")
    return _emit(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("transpose needs a matrix")
    return _emit("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def tsum(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def tmean(a) -> Tensor:
    a = _as_tensor(a)
    n = max(a.size, 1)
    return _emit("mean", np.asarray(a.data.mean() if a.size else 0.0), (a,), lambda g: (np.full(a.shape, float(g) / n),))


# ----------------------------------------------------------------------------
# random streams


class Stream:
    """Named, splittable counter-based random stream (Philox).

    ``Stream(42).child("agent", 3).child("layer", 1)`` always yields the same
    sequence, independent of how many draws other streams have made.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        digest = hashlib.sha256(repr((self.seed, self.path)).encode()).digest()
        key = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed & 0xFFFFFFFF, *key])))

    def child(self, *names) -> "Stream":
        return Stream(self.seed, self.path + tuple(names))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape: Iterable[int]) -> np.ndarray:
        return self._gen.standard_normal(tuple(shape))

    def uniform(self, low: float, high: float, shape: Iterable[int]) -> np.ndarray:
        return self._gen.uniform(low, high, tuple(shape))

    def __repr__(self) -> str:
        return f"Stream({self.seed}, {self.path!r})"


def gaussian_sample(shape: Sequence[int], stream: Stream) -> Tensor:
    """I.i.d. standard normal samples drawn from ``stream``."""
    return Tensor._wrap(stream.normal(shape))
