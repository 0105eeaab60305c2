"""Dense float64 tensors with a define-by-run gradient tape.

A :class:`Tape` records every differentiable operation executed while it is
active. ``tape.backward(loss)`` walks the record in reverse order, exactly
once, and deposits gradients on leaf tensors created with
``requires_grad=True``.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import itertools
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .exceptions import ShapeError, UsageError

_ids = itertools.count()
_active: list["Tape"] = []


class Tensor:
    """An n-d array of float64 values that can take part in a gradient tape.

    Networks mostly pass rank-4 ``(N, C, H, W)`` activations around, but the
    engine itself is rank-agnostic so that matrix views (``N x D``) and
    parameter vectors share the same machinery.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "id", "_derived")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.asarray(data, dtype=np.float64, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.id = next(_ids)
        self._derived = False

    # basic array protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._derived

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operators delegate to the functional module ---------------------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, key):
        from . import functional as F
        return F.index(self, key)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of the operations of one forward pass.

    Use as a context manager; operations run outside any active tape are
    plain numpy computations and are not differentiable.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op, inputs, output, backward) -> None:
        if self.consumed:
            raise UsageError("tape already ran backward; call reset() before recording again")
        self.records.append(_Record(tuple(inputs), output, backward, op))

    def reset(self) -> None:
        self.records = []
        self.consumed = False

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        """Populate ``.grad`` of every leaf reachable from ``loss``.

        Leaf gradients accumulate into any existing ``.grad`` so that several
        tapes may contribute before an optimizer step.
        """
        if self.consumed:
            raise UsageError("backward() already ran on this tape; reset() it first")
        if loss.size != 1:
            raise UsageError(f"backward() needs a scalar root, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {loss.id: np.full(loss.shape, float(seed))}
        leaves: dict[int, Tensor] = {}
        if loss.requires_grad and loss.is_leaf:
            leaves[loss.id] = loss
        for rec in reversed(self.records):
            g = grads.pop(rec.output.id, None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(f"{rec.op}: gradient shape {gi.shape} != input shape {t.shape}")
                if t.id in grads:
                    grads[t.id] = grads[t.id] + gi
                else:
                    grads[t.id] = gi
                if t.is_leaf:
                    leaves[t.id] = t
        for tid, t in leaves.items():
            g = grads.get(tid)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g


def active_tape() -> Tape | None:
    return _active[-1] if _active else None


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``data`` in a tensor and record it on the active tape if needed."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._derived = True
        tape.record(op, inputs, out, backward)
    return out


class ParamStore:
    """Named, ordered collection of trainable tensors."""

    def __init__(self, items=()):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, tensor in items:
            self.add(name, tensor)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise UsageError(f"duplicate parameter name {name!r}")
        if any(t is tensor for t in self._params.values()):
            raise UsageError(f"tensor already registered under another name (adding {name!r})")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def count(self) -> int:
        return int(sum(t.size for t in self._params.values()))
