"""Dense tensor with a reverse-mode gradient tape.

Tensors wrap a contiguous row-major numpy array. Every differentiable op is a
``Function`` subclass; applying one records the parents on the output so that
``backward`` can replay the graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on invalid backward calls (non-scalar root, reused or detached tape)."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d scalars to shape (1,)
    return arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)


class Function:
    """Base class for recorded ops.

    Subclasses implement ``forward`` on raw arrays and ``backward`` returning
    one gradient array (or None) per parent.
    """

    def __init__(self, *parents: "Tensor"):
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *parents: "Tensor", **kwargs) -> "Tensor":
        fn = cls(*parents)
        out = fn.forward(*(p.data for p in parents), **kwargs)
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        t = Tensor._wrap(out, requires_grad=needs)
        if needs:
            t._ctx = fn
        return t


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_ctx", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind in "iub" and dtype is None:
            arr = arr.astype(np.float64)
        self.data = _contiguous(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._ctx: Function | None = None
        self._consumed = False
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = _contiguous(arr)
        t.grad = None
        t.requires_grad = requires_grad
        t._ctx = None
        t._consumed = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; every op below still demands exact shapes
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for p in node._ctx.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("tape already consumed by a previous backward; rebuild the graph")
    if not loss.requires_grad:
        raise TapeError("loss is detached from any requires_grad leaf")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        fn = node._ctx
        if fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = fn.backward(g)
        for p, pg in zip(fn.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"gradient shape {pg.shape} does not match operand {p.shape}")
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        # free the tape as we go; a second backward must rebuild it
        node._ctx = None
        node._consumed = True
    loss._consumed = True


# ---------------------------------------------------------------------------
# SMT1 serialization: magic, u32 rank, u64 extents, f64 payload (little endian)

_MAGIC = b"SMT1"


def save_tensor(t: Tensor | np.ndarray, path: str | Path) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tensor(path: str | Path, dtype=np.float64) -> Tensor:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    (rank,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{rank}Q", raw, 8)
    off = 8 + 8 * rank
    count = int(np.prod(shape)) if rank else 1
    payload = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
    if off + 8 * count != len(raw):
        raise ValueError(f"{path}: payload length mismatch")
    return Tensor(payload.reshape(shape).astype(dtype))
