"""Differentiable primitives on :class:`~smolpipe.tensor.Tensor`.

Elementwise ops demand identical shapes. The only implicit broadcasting is
over leading batch dims in ``matmul``; anything else goes through an explicit
``broadcast_to``.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Function, ShapeError, Tensor


class EmptyLossError(ValueError):
    """All positions were masked out; the mean loss is undefined."""


def _same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} must match exactly")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Add(Function):
    def forward(self, a, b):
        _same_shape("add", a, b)
        return a + b

    def backward(self, g):
        return g, g


class Sub(Function):
    def forward(self, a, b):
        _same_shape("sub", a, b)
        return a - b

    def backward(self, g):
        return g, -g


class Mul(Function):
    def forward(self, a, b):
        _same_shape("mul", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return g * self.b, g * self.a


class Scale(Function):
    def forward(self, a, factor: float):
        self.factor = factor
        return a * np.asarray(factor, dtype=a.dtype)

    def backward(self, g):
        return (g * np.asarray(self.factor, dtype=g.dtype),)


class BroadcastTo(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        return np.broadcast_to(a, shape).copy()

    def backward(self, g):
        return (_unbroadcast(g, self.in_shape),)


class SumAll(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return np.asarray(a.sum())

    def backward(self, g):
        return (np.full(self.in_shape, g, dtype=g.dtype),)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: cannot contract {a.shape} with {b.shape}")
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        ga = g @ np.swapaxes(self.b, -1, -2)
        gb = np.swapaxes(self.a, -1, -2) @ g
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class PermuteReshape(Function):
    def forward(self, a, perm, new_shape):
        perm = tuple(perm)
        if sorted(perm) != list(range(a.ndim)):
            raise ShapeError(f"permute: {perm} is not a permutation of rank {a.ndim}")
        new_shape = tuple(int(n) for n in new_shape)
        if math.prod(new_shape) != a.size:
            raise ShapeError(f"reshape: {a.shape} has {a.size} elements, target {new_shape} has {math.prod(new_shape)}")
        self.in_shape = a.shape
        self.perm = perm
        moved = np.transpose(a, perm)
        self.mid_shape = moved.shape
        return np.ascontiguousarray(moved).reshape(new_shape)

    def backward(self, g):
        inv = np.argsort(self.perm)
        return (np.ascontiguousarray(np.transpose(g.reshape(self.mid_shape), inv)),)


class Softmax(Function):
    def forward(self, a, axis):
        self.axis = axis
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
        self.y = e / e.sum(axis=axis, keepdims=True)
        return self.y

    def backward(self, g):
        y = self.y
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps):
        d = x.shape[-1]
        if gamma.shape != (d,) or beta.shape != (d,):
            raise ShapeError(f"layer_norm: gain/bias {gamma.shape}/{beta.shape} vs features {d}")
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.rstd
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, g):
        xhat = self.xhat
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * self.gamma
        dx = self.rstd * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta


_GELU_C = math.sqrt(2.0 / math.pi)


class Gelu(Function):
    def forward(self, x):
        self.x = x
        self.t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
        return 0.5 * x * (1.0 + self.t)

    def backward(self, g):
        x, t = self.x, self.t
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)


class Embedding(Function):
    def forward(self, weight, ids):
        self.ids = ids
        self.wshape = weight.shape
        return weight[ids]

    def backward(self, g):
        gw = np.zeros(self.wshape, dtype=g.dtype)
        np.add.at(gw, self.ids.reshape(-1), g.reshape(-1, self.wshape[1]))
        return (gw,)


class MaskedFill(Function):
    def forward(self, x, mask, value):
        self.mask = np.broadcast_to(mask, x.shape)
        return np.where(self.mask, np.asarray(value, dtype=x.dtype), x)

    def backward(self, g):
        return (np.where(self.mask, 0, g).astype(g.dtype),)


class ScatterRows(Function):
    def forward(self, base, values, positions):
        d = base.shape[-1]
        if values.ndim != 2 or values.shape[1] != d or values.shape[0] != len(positions):
            raise ShapeError(f"scatter_rows: {len(positions)} positions but values {values.shape} into rows of {d}")
        self.positions = positions
        self.shape = base.shape
        out = base.reshape(-1, d).copy()
        out[positions] = values
        return out.reshape(base.shape)

    def backward(self, g):
        d = self.shape[-1]
        flat = g.reshape(-1, d)
        gv = flat[self.positions].copy()
        gb = flat.copy()
        gb[self.positions] = 0
        return gb.reshape(self.shape), gv


class Rotary(Function):
    """Rotate interleaved (2i, 2i+1) pairs by position-dependent angles."""

    def forward(self, x, cos, sin):
        self.cos, self.sin = cos, sin
        xe, xo = x[..., 0::2], x[..., 1::2]
        out = np.empty_like(x)
        out[..., 0::2] = xe * cos - xo * sin
        out[..., 1::2] = xe * sin + xo * cos
        return out

    def backward(self, g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * self.cos + go * self.sin
        gx[..., 1::2] = -ge * self.sin + go * self.cos
        return (gx,)


class CrossEntropyMasked(Function):
    def forward(self, logits, targets, mask):
        if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
            raise ShapeError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
        sel = np.flatnonzero(mask.reshape(-1))
        if sel.size == 0:
            raise EmptyLossError("every position is masked; loss is empty")
        V = logits.shape[-1]
        tgt = targets.reshape(-1)[sel]
        if tgt.min() < 0 or tgt.max() >= V:
            raise ValueError(f"targets must lie in [0, {V})")
        rows = logits.reshape(-1, V)[sel]
        m = rows.max(axis=1, keepdims=True)
        e = np.exp(rows - m)
        z = e.sum(axis=1, keepdims=True)
        logp = rows - m - np.log(z)
        self.sel, self.tgt, self.shape = sel, tgt, logits.shape
        self.p = e / z
        return np.asarray(-logp[np.arange(sel.size), tgt].mean())

    def backward(self, g):
        n = self.sel.size
        d = self.p.copy()
        d[np.arange(n), self.tgt] -= 1.0
        d *= g / n
        V = self.shape[-1]
        full = np.zeros((math.prod(self.shape[:-1]), V), dtype=d.dtype)
        full[self.sel] = d
        return (full.reshape(self.shape),)


# ---------------------------------------------------------------------------
# functional surface


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    return BroadcastTo.apply(a, shape=tuple(shape))


def sum_all(a: Tensor) -> Tensor:
    return SumAll.apply(a)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def permute_reshape(x: Tensor, perm: Sequence[int], new_shape: Sequence[int]) -> Tensor:
    """Transpose by ``perm`` then reshape (always a fresh row-major copy)."""
    return PermuteReshape.apply(x, perm=perm, new_shape=new_shape)


def reshape(x: Tensor, new_shape: Sequence[int]) -> Tensor:
    return PermuteReshape.apply(x, perm=tuple(range(x.ndim)), new_shape=new_shape)


def transpose(x: Tensor, perm: Sequence[int]) -> Tensor:
    return PermuteReshape.apply(x, perm=perm, new_shape=tuple(x.shape[p] for p in perm))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def embedding(weight: Tensor, ids) -> Tensor:
    return Embedding.apply(weight, ids=np.asarray(ids, dtype=np.int64))


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    return MaskedFill.apply(x, mask=np.asarray(mask, dtype=bool), value=value)


def scatter_rows(base: Tensor, values: Tensor, positions) -> Tensor:
    """Overwrite rows ``positions`` of ``base`` (viewed as [-1, d]) with ``values``."""
    return ScatterRows.apply(base, values, positions=np.asarray(positions, dtype=np.int64))


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    return Rotary.apply(x, cos=cos, sin=sin)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    if b is None:
        return y
    return add(y, broadcast_to(b, y.shape))


def cross_entropy_masked(logits: Tensor, targets, mask) -> Tensor:
    """Mean NLL over positions where ``mask`` is true; other positions are never read."""
    return CrossEntropyMasked.apply(
        logits, targets=np.asarray(targets, dtype=np.int64), mask=np.asarray(mask, dtype=bool)
    )
