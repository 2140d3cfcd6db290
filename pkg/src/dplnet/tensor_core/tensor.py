"""Dense tensors, parameters and the operation tape used for reverse-mode AD."""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator

import numpy as np

SUPPORTED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_DEBUG = os.environ.get("DPLNET_DEBUG", "") not in ("", "0")


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when a caller breaks an operation's preconditions."""


def set_debug(flag: bool) -> None:
    """Toggle finite-value assertions after every recorded operation."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


class Tensor:
    """A row-major numpy array plus a ``requires_grad`` flag."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in SUPPORTED_DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar, resolved lazily to avoid an import cycle with ops
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

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        return ops.transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named, optionally frozen tensor owned by a model.

    Frozen parameters still take part in gradient propagation; the freeze
    only blocks optimizer updates.
    """

    def __init__(self, data, name: str = "", frozen: bool = False, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.frozen = bool(frozen)

    @property
    def tensor(self) -> Tensor:
        return self

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


@dataclass
class Record:
    op: str
    inputs: tuple
    output: Tensor
    ctx: Any
    scope: str = ""


@dataclass
class Tape:
    """Ordered log of executed differentiable operations.

    Operations are recorded only while the tape is active (``with tape:``)
    and only when at least one input requires a gradient.
    """

    records: list[Record] = field(default_factory=list)
    _scopes: list[str] = field(default_factory=list, repr=False)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, op: str, inputs: tuple, output: Tensor, ctx: Any = None) -> None:
        self.records.append(Record(op, inputs, output, ctx, ".".join(self._scopes)))

    def __len__(self) -> int:
        return len(self.records)

    def ops(self) -> list[str]:
        return [r.op for r in self.records]

    def scopes(self) -> list[str]:
        """Distinct non-empty scopes in first-seen order."""
        seen: dict[str, None] = {}
        for r in self.records:
            if r.scope:
                seen.setdefault(r.scope, None)
        return list(seen)


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


@contextlib.contextmanager
def scope(name: str) -> Iterator[None]:
    """Label records made inside the block (used to count layer calls)."""
    tape = active_tape()
    if tape is None:
        yield
        return
    tape._scopes.append(name)
    try:
        yield
    finally:
        tape._scopes.pop()


# vjp(grad_out, ctx, inputs, output) -> tuple of per-input gradients (or None)
VJP: dict[str, Callable] = {}


def register_vjp(op: str):
    def deco(fn):
        VJP[op] = fn
        return fn
    return deco


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_output(op: str, data: np.ndarray, inputs: tuple, ctx: Any = None) -> Tensor:
    """Wrap an op result and record it on the active tape when needed."""
    needs_grad = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad)
    if _DEBUG and not np.all(np.isfinite(out.data)):
        finite_in = all(np.all(np.isfinite(t.data)) for t in inputs if isinstance(t, Tensor))
        if finite_in:
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    tape = active_tape()
    if needs_grad and tape is not None:
        tape.record(op, inputs, out, ctx)
    return out


def _accumulate(store: dict, key: int, grad: np.ndarray) -> None:
    prev = store.get(key)
    store[key] = grad if prev is None else prev + grad


def backward(tape: Tape, loss: Tensor, wrt=()) -> dict:
    """Replay adjoints in reverse execution order.

    Returns ``{parameter name: gradient array}`` for every parameter on the
    path from the tape to ``loss``, frozen ones included.  Tensors passed in
    ``wrt`` are reported under their position index ``("wrt", i)``.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    params: dict[int, Parameter] = {}
    for rec in reversed(tape.records):
        g = adj.pop(id(rec.output), None)
        if g is None:
            continue
        grads = VJP[rec.op](g, rec.ctx, rec.inputs, rec.output)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if isinstance(inp, Parameter):
                params[id(inp)] = inp
            _accumulate(adj, id(inp), gi)
    out: dict = {}
    for key, p in params.items():
        if p.name in out:
            raise ContractError(f"duplicate parameter name {p.name!r} on tape")
        out[p.name] = adj[key]
    for i, t in enumerate(wrt):
        out[("wrt", i)] = adj.get(id(t), np.zeros_like(t.data))
    return out
