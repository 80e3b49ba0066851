"""Pixel shuffle (space-to-depth) on encoder feature maps.

A map of ``h×w`` tokens with ``c`` channels becomes ``(h/r)×(w/r)`` tokens with
``c·r²`` channels. Within an output token the channel index is
``(di·r + dj)·c + k`` for the source pixel ``(i·r+di, j·r+dj)``, channel ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from . import ops
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class VisualFeatureMap:
    data: Tensor  # [..., h, w, c]

    def __post_init__(self):
        if self.data.ndim < 3 or min(self.data.shape[-3:]) < 1:
            raise ShapeError(f"feature map needs [..., h, w, c], got {self.data.shape}")

    @property
    def h(self) -> int:
        return self.data.shape[-3]

    @property
    def w(self) -> int:
        return self.data.shape[-2]

    @property
    def c(self) -> int:
        return self.data.shape[-1]

    @property
    def n_tokens(self) -> int:
        return self.h * self.w


MapLike = Union[VisualFeatureMap, Tensor]


def _unwrap(m: MapLike) -> tuple[Tensor, bool]:
    if isinstance(m, VisualFeatureMap):
        return m.data, True
    return m, False


def _check_ratio(r: int) -> None:
    if not isinstance(r, int) or r < 1:
        raise ValueError(f"shuffle ratio must be a positive integer, got {r!r}")


def pixel_shuffle(m: MapLike, r: int) -> MapLike:
    _check_ratio(r)
    x, wrapped = _unwrap(m)
    *lead, h, w, c = x.shape
    if h % r or w % r:
        raise ShapeError(f"pixel_shuffle: extents {h}x{w} not divisible by r={r}")
    nl = len(lead)
    x = ops.reshape(x, (*lead, h // r, r, w // r, r, c))
    perm = (*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    y = ops.permute_reshape(x, perm, (*lead, h // r, w // r, r * r * c))
    return VisualFeatureMap(y) if wrapped else y


def pixel_unshuffle(m: MapLike, r: int) -> MapLike:
    _check_ratio(r)
    x, wrapped = _unwrap(m)
    *lead, h, w, cc = x.shape
    if cc % (r * r):
        raise ShapeError(f"pixel_unshuffle: channels {cc} not divisible by r^2={r * r}")
    c = cc // (r * r)
    nl = len(lead)
    x = ops.reshape(x, (*lead, h, w, r, r, c))
    perm = (*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    y = ops.permute_reshape(x, perm, (*lead, h * r, w * r, c))
    return VisualFeatureMap(y) if wrapped else y


def flatten_tokens(m: MapLike) -> Tensor:
    """Raster-order token list ``[..., h·w, c]``."""
    x, _ = _unwrap(m)
    *lead, h, w, c = x.shape
    return ops.reshape(x, (*lead, h * w, c))


def tokens_after_shuffle(h: int, w: int, r: int) -> int:
    if h % r or w % r:
        raise ShapeError(f"{h}x{w} not divisible by r={r}")
    return (h // r) * (w // r)
