"""Dense tensors, trainable parameters and the reverse-mode computation record.

A :class:`Tape` records every differentiable operation executed while it is
active.  ``tape.backward(loss)`` replays the record in reverse insertion order
and accumulates gradients into every leaf tensor that requires them
(parameters included).  A record can be consumed exactly once.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "RecordError",
    "backward",
    "default_dtype",
    "precision",
    "no_record",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class RecordError(RuntimeError):
    """Raised on misuse of a computation record."""


_local = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors."""
    previous = default_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = previous


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Suspend recording, e.g. for evaluation or finite differences."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """Immutable dense float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.array(data, dtype=dtype if dtype is not None else default_dtype())
        if arr.dtype.kind != "f":
            raise TypeError(f"tensor dtype must be floating point, got {arr.dtype}")
        if arr.size == 0:
            raise ShapeError(f"every dimension must be >= 1, got shape {arr.shape}")
        _check_finite(arr, "tensor construction")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = object.__new__(Tensor)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    # Operator sugar; the implementations live in beef.ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)


class Parameter(Tensor):
    """Trainable tensor with a name and a zero-initialised gradient buffer.

    Parameter values are updated in place by optimisers, so unlike ordinary
    tensors their data stays writeable.
    """

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else default_dtype())
        if arr.size == 0:
            raise ShapeError(f"every dimension must be >= 1, got shape {arr.shape}")
        _check_finite(arr, f"parameter {name!r}")
        self.data = arr
        self.requires_grad = True
        self.grad = np.zeros_like(arr)
        self.name = name

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype.name})"


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Node:
    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], vjp: VJP):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of differentiable operations (a computation record).

    Use as a context manager; operations executed inside the ``with`` block
    on tensors that require gradients are appended to the record.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._outputs: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise RecordError("record already consumed")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        elif self in stack:
            stack.remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], vjp: VJP) -> None:
        if self.consumed:
            raise RecordError("record already consumed")
        self._nodes.append(_Node(output, inputs, vjp))
        self._outputs.add(id(output))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.consumed:
            raise RecordError("record already consumed; backward may run only once")
        if loss.shape != ():
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise RecordError("loss was not produced by this record")

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for tensor, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if gi.shape != tensor.shape:
                    raise ShapeError(
                        f"internal: gradient shape {gi.shape} != value shape {tensor.shape}"
                    )
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in self._outputs:
                    leaves[key] = tensor

        for key, tensor in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if tensor.grad is None:
                tensor.grad = np.array(g, dtype=tensor.dtype)
            else:
                tensor.grad = tensor.grad + g.astype(tensor.grad.dtype, copy=False)
        self.consumed = True
        self._nodes = []
        self._outputs = set()


def backward(record: Tape, loss: Tensor) -> None:
    """Functional spelling of :meth:`Tape.backward`."""
    record.backward(loss)


def make_output(arr: np.ndarray, inputs: tuple[Tensor, ...], vjp: VJP, what: str) -> Tensor:
    """Wrap an op result, check it, and record the op if any input needs grad."""
    if not isinstance(arr, np.ndarray):
        arr = np.asarray(arr)
    dtypes = {t.dtype for t in inputs}
    if len(dtypes) > 1:
        raise TypeError(f"{what}: mixed dtypes {sorted(d.name for d in dtypes)}")
    if inputs and arr.dtype != inputs[0].dtype:
        arr = arr.astype(inputs[0].dtype)
    _check_finite(arr, what)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=needs)
    if needs:
        tape.record(out, inputs, vjp)
    return out
