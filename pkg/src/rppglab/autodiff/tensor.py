"""DiffTensor and the recording tape used for reverse-mode differentiation.

A :class:`Tape` is created per forward pass.  Every differentiable op that
touches a tensor with ``requires_grad`` appends a record to the active tape;
:meth:`Tape.backward` replays the records in reverse creation order, which is
a valid reverse topological order because an op's inputs always exist before
the op is recorded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class TensorError(ValueError):
    """Raised for invalid shapes or arguments to a tensor op."""

    def __init__(self, op: str, message: str, shapes: Sequence[tuple] = ()):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        detail = f" (shapes: {', '.join(str(s) for s in self.shapes)})" if shapes else ""
        super().__init__(f"{op}: {message}{detail}")


class DiffTensor:
    """A float64 array that can take part in a recorded computation."""

    __slots__ = ("value", "grad", "requires_grad", "node_id", "name")
    __array_ufunc__ = None  # make ndarray <op> DiffTensor defer to our reflected ops

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise TensorError("item", "tensor is not scalar", [self.shape])
        return float(self.value.reshape(()))

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.value.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffTensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; the ops module is imported lazily to avoid a cycle.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul_scalar(self, -1.0)

    def __truediv__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.mul_scalar(self, 1.0 / float(other))
        return ops.mul(self, ops.reciprocal(as_tensor(other)))

    def __rtruediv__(self, other):
        from . import ops
        return ops.mul(other, ops.reciprocal(self))

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.slice_(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(x)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Record:
    kind: str
    inputs: tuple[DiffTensor, ...]
    output: DiffTensor
    backward: BackwardFn
    needs: tuple[bool, ...] = ()


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered list of differentiable op records for one forward pass.

    Use as a context manager; ops executed inside the block are recorded.
    Outside any tape, ops still compute values but record nothing.
    """

    def __init__(self):
        self.records: list[Record] = []
        self._leaves: dict[int, DiffTensor] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def _register(self, t: DiffTensor) -> None:
        if t.node_id is None or self._leaves.get(t.node_id) is not t:
            t.node_id = len(self._leaves)
            self._leaves[t.node_id] = t

    def add(self, kind: str, inputs: Sequence[DiffTensor], output: DiffTensor,
            backward: BackwardFn) -> None:
        for t in inputs:
            self._register(t)
        self._register(output)
        # requires_grad is read now: freezing a tensor only for the forward
        # pass keeps it out of this record's backward pass as well
        self.records.append(Record(kind, tuple(inputs), output, backward,
                                   tuple(t.requires_grad for t in inputs)))

    def backward(self, root: DiffTensor) -> None:
        """Accumulate d(root)/d(node) into ``.grad`` of every recorded node."""
        if root.value.size != 1:
            raise TensorError("backward", "root must be scalar", [root.shape])
        wanted = {id(root)}
        for rec in self.records:
            wanted.update(id(t) for t, n in zip(rec.inputs, rec.needs) if n)
        for t in self._leaves.values():
            if id(t) in wanted:
                t.grad = np.zeros_like(t.value)
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            rec.output.grad = g
            in_grads = rec.backward(g)
            for t, gi, need in zip(rec.inputs, in_grads, rec.needs):
                if gi is None or not need:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        # whatever is left belongs to leaves (tensors no record produced)
        for t in self._leaves.values():
            g = grads.get(id(t))
            if g is not None:
                t.grad = np.array(np.reshape(g, t.shape))


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(root: DiffTensor, tape: Tape | None = None) -> None:
    tape = tape or active_tape()
    if tape is None:
        raise TensorError("backward", "no tape recorded this computation")
    tape.backward(root)
