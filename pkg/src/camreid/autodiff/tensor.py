"""Dense rank-4 tensors with an explicit reverse-mode gradient tape.

Every tensor carries a (N, C, H, W) shape and float64 data stored
row-major. Operations (see :mod:`camreid.autodiff.ops`) record themselves
on a :class:`Tape` when any of their inputs is attached to one; calling
:func:`backward` on the tape then accumulates vector-Jacobian products in
reverse recording order. Everything is 64-bit: the point of this core is
that finite-difference checks at 1e-5 steps stay trustworthy.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

Shape4 = tuple[int, int, int, int]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    """A (N, C, H, W) array of float64 values, optionally tape-attached.

    Parameters with ``requires_grad=True`` receive their gradient in
    ``.grad`` after :func:`backward` runs on the tape that recorded the
    ops they fed.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, tape: Optional["Tape"] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensor data must be rank-4 (N,C,H,W), got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape = tape

    @property
    def shape(self) -> Shape4:
        return self.data.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- fixture serialization: one line "N C H W", one line of values --

    def to_text(self) -> str:
        head = " ".join(str(d) for d in self.shape)
        body = " ".join(repr(float(v)) for v in self.data.reshape(-1))
        return f"{head}\n{body}\n"

    @classmethod
    def from_text(cls, text: str, requires_grad: bool = False) -> "Tensor":
        tokens = text.split()
        if len(tokens) < 4:
            raise ValueError("tensor text needs at least the 4 shape fields")
        shape = tuple(int(t) for t in tokens[:4])
        values = np.array([float(t) for t in tokens[4:]], dtype=np.float64)
        expected = int(np.prod(shape))
        if values.size != expected:
            raise ValueError(f"tensor text declares shape {shape} ({expected} values) but carries {values.size}")
        return cls(values.reshape(shape), requires_grad=requires_grad)

    # convenience constructors -----------------------------------------

    @classmethod
    def scalar(cls, value: float, tape: Optional["Tape"] = None) -> "Tensor":
        return cls(np.array(value, dtype=np.float64).reshape(1, 1, 1, 1), tape=tape)

    @classmethod
    def from_matrix(cls, rows, requires_grad: bool = False, tape: Optional["Tape"] = None) -> "Tensor":
        """Lift an (N, K) matrix into the canonical (N, K, 1, 1) layout."""
        arr = np.asarray(rows, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"from_matrix needs a rank-2 array, got shape {arr.shape}")
        return cls(arr[:, :, None, None], requires_grad=requires_grad, tape=tape)

    def to_matrix(self) -> np.ndarray:
        n, c, h, w = self.shape
        if (h, w) != (1, 1):
            raise ShapeError(f"to_matrix needs trailing (1,1) dims, got shape {self.shape}")
        return self.data[:, :, 0, 0].copy()

    @classmethod
    def zeros(cls, shape: Sequence[int], requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=np.float64), requires_grad=requires_grad)


@dataclass
class OpRecord:
    """One recorded operation: inputs, output, and its VJP rule."""

    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


@dataclass
class Tape:
    """Append-only operation log; records are topologically ordered by
    construction because each op's inputs already exist when it runs."""

    records: list[OpRecord] = field(default_factory=list)

    def record(self, name, inputs, output, vjp) -> None:
        self.records.append(OpRecord(name, tuple(inputs), output, vjp))

    def __len__(self) -> int:
        return len(self.records)


def merge_tapes(*tensors: Tensor) -> Optional[Tape]:
    """Return the single tape the given tensors agree on (or None)."""
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands belong to different tapes")
    return tape


# Fault injection hook used by the gradient-check harness: maps an op
# name to a multiplicative corruption of its VJP outputs.
_VJP_FAULTS: dict[str, float] = {}


@contextlib.contextmanager
def inject_vjp_fault(op_name: str, scale: float = 2.0) -> Iterator[None]:
    """Temporarily corrupt the named op's backward rule by ``scale``."""
    _VJP_FAULTS[op_name] = scale
    try:
        yield
    finally:
        _VJP_FAULTS.pop(op_name, None)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every
    requires_grad tensor reachable from ``loss`` through ``tape``.

    The loss must be scalar, i.e. shaped (1,1,1,1). When a tensor feeds
    several recorded ops its contributions sum. Traversal is the exact
    reverse of recording order, so results are deterministic.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a scalar loss of shape (1,1,1,1), got {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1), dtype=np.float64)}
    for rec in reversed(tape.records):
        g_out = grads.pop(id(rec.output), None)
        if g_out is None:
            continue
        in_grads = rec.vjp(g_out)
        fault = _VJP_FAULTS.get(rec.name)
        for tensor, g in zip(rec.inputs, in_grads):
            if g is None:
                continue
            if fault is not None:
                g = g * fault
            acc = grads.get(id(tensor))
            if acc is None:
                grads[id(tensor)] = np.array(g, dtype=np.float64, copy=True)
            else:
                acc += g
        if rec.output.requires_grad and g_out is not None:
            _assign_grad(rec.output, g_out)
    for rec in tape.records:
        for tensor in rec.inputs:
            if tensor.requires_grad:
                g = grads.pop(id(tensor), None)
                if g is not None:
                    _assign_grad(tensor, g)


def _assign_grad(tensor: Tensor, g: np.ndarray) -> None:
    if tensor.grad is None:
        tensor.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        tensor.grad = tensor.grad + g
