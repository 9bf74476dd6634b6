"""Dense tensors and the recording tape for reverse-mode differentiation."""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_PRECISIONS = {"single": np.float32, "wide": np.float64}

_local = threading.local()


def _ctx():
    if not hasattr(_local, "dtype"):
        _local.dtype = np.float32
        _local.tapes = []
    return _local


def get_dtype():
    return _ctx().dtype


def set_precision(mode: str) -> None:
    """Select "single" (32-bit) or "wide" (64-bit) storage for new tensors."""
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision mode {mode!r}; expected one of {sorted(_PRECISIONS)}")
    _ctx().dtype = _PRECISIONS[mode]


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    prev = get_dtype()
    set_precision(mode)
    try:
        yield
    finally:
        _ctx().dtype = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=get_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # no dtype conversion; used by ops on already-typed results
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    @property
    def T(self):
        from . import ops

        return ops.transpose(self)

    def sum(self):
        from . import ops

        return ops.sum(self)

    def mean(self):
        from . import ops

        return ops.mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Entry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Entries are appended as ops run, so the list is already in topological
    order; ``backward`` walks it once in reverse.
    """

    entries: list[Entry] = field(default_factory=list)
    visits: int = 0

    def __enter__(self) -> "Tape":
        _ctx().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ctx().tapes.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, inputs, output: Tensor, backward) -> None:
        self.entries.append(Entry(op, tuple(inputs), output, backward))

    def backward(self, root: Tensor, leaves: Sequence[Tensor] | None = None) -> list[np.ndarray] | None:
        """Propagate d(root)/d(.) to every requires_grad leaf on the tape.

        Leaf ``.grad`` attributes are overwritten (not accumulated across
        calls). When ``leaves`` is given the matching gradients are returned,
        zeros for leaves the root does not depend on.
        """
        if root.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        produced = {id(e.output) for e in self.entries}
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaf_grads: dict[int, np.ndarray] = {}
        leaf_objs: dict[int, Tensor] = {}
        self.visits = 0
        for entry in reversed(self.entries):
            self.visits += 1
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            in_grads = entry.backward(g)
            for inp, gi in zip(entry.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in produced:
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
                else:
                    leaf_objs[key] = inp
                    if key in leaf_grads:
                        leaf_grads[key] += gi
                    else:
                        leaf_grads[key] = np.array(gi, dtype=inp.data.dtype, copy=True)
        # leaves that appear on the tape but are unreachable still get zeros
        for entry in self.entries:
            for inp in entry.inputs:
                if inp.requires_grad and id(inp) not in produced and id(inp) not in leaf_objs:
                    leaf_objs[id(inp)] = inp
                    leaf_grads[id(inp)] = np.zeros_like(inp.data)
        if root.requires_grad and id(root) not in produced:
            # root is itself a leaf
            leaf_objs[id(root)] = root
            leaf_grads[id(root)] = np.ones_like(root.data)
        for key, t in leaf_objs.items():
            t.grad = leaf_grads[key]
        if leaves is None:
            return None
        return [leaf_grads.get(id(t), np.zeros_like(t.data)) for t in leaves]


def active_tape() -> Tape | None:
    tapes = _ctx().tapes
    return tapes[-1] if tapes else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on every active tape."""
    ctx = _ctx()
    saved = ctx.tapes
    ctx.tapes = []
    try:
        yield
    finally:
        ctx.tapes = saved
