"""Image tiling, video frame sampling and patch extraction.

Images are ``(height, width, 3)`` uint8 arrays wrapped in :class:`RawImage`.
Sizes in function arguments are given as ``(width, height)`` where both
appear, matching the usual ``W×H`` notation.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kvfile import read_kv, write_kv
from .tensor import Tensor

MAX_GRID = 8


@dataclass(frozen=True)
class RawImage:
    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.ndim != 3 or d.shape[2] != 3 or d.shape[0] < 1 or d.shape[1] < 1:
            raise ValueError(f"RawImage needs shape (h>=1, w>=1, 3), got {d.shape}")
        if d.dtype != np.uint8:
            object.__setattr__(self, "data", d.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def solid(cls, width: int, height: int, rgb=(0, 0, 0)) -> "RawImage":
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[:] = np.asarray(rgb, dtype=np.uint8)
        return cls(arr)


@dataclass
class Tile:
    row: int
    col: int
    image: RawImage


@dataclass
class TileGrid:
    tiles: list[Tile]
    global_image: RawImage
    rows: int
    cols: int
    tile_size: int
    resized: RawImage | None = None

    def __post_init__(self):
        if self.tiles and len(self.tiles) != self.rows * self.cols:
            raise ValueError(f"{len(self.tiles)} tiles for a {self.rows}x{self.cols} grid")
        if len({(t.row, t.col) for t in self.tiles}) != len(self.tiles):
            raise ValueError("duplicate tile coordinates")

    @property
    def n_subimages(self) -> int:
        return len(self.tiles) + 1

    def images(self) -> list[RawImage]:
        """Tiles in raster order followed by the global image."""
        return [t.image for t in self.tiles] + [self.global_image]


@dataclass
class FrameSet:
    frames: list[RawImage]
    source_timestamps: list[float]
    indices: list[int] = field(default_factory=list)
    clamped: bool = False

    def __post_init__(self):
        if not self.frames:
            raise ValueError("FrameSet needs at least one frame")
        if len(self.frames) != len(self.source_timestamps):
            raise ValueError("one timestamp per frame required")
        ts = self.source_timestamps
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, edges clamped
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: RawImage, width: int, height: int) -> RawImage:
    """Bilinear resample: each output pixel blends its 4 nearest source pixels."""
    if width < 1 or height < 1:
        raise ValueError(f"target size must be positive, got {width}x{height}")
    if (width, height) == (img.width, img.height):
        return RawImage(img.data.copy())
    src = img.data.astype(np.float64)
    y0, y1, fy = _axis_weights(img.height, height)
    x0, x1, fx = _axis_weights(img.width, width)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return RawImage(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def longest_edge_size(width: int, height: int, cap: int) -> tuple[int, int]:
    if cap < 1:
        raise ValueError("cap must be >= 1")
    longest = max(width, height)
    if longest <= cap:
        return width, height
    s = cap / longest
    if width >= height:
        return cap, max(1, _round_half_up(height * s))
    return max(1, _round_half_up(width * s)), cap


def resize_longest_edge(img: RawImage, cap: int) -> RawImage:
    w, h = longest_edge_size(img.width, img.height, cap)
    if (w, h) == (img.width, img.height):
        return img
    return resize_bilinear(img, w, h)


def grid_shape(width: int, height: int, tile_size: int, max_grid: int = MAX_GRID) -> tuple[int, int]:
    """(rows, cols) after rounding each side up to a tile multiple."""
    if tile_size < 1:
        raise ValueError("tile_size must be >= 1")
    rows = min(max_grid, max(1, math.ceil(height / tile_size)))
    cols = min(max_grid, max(1, math.ceil(width / tile_size)))
    return rows, cols


def tile_count(width: int, height: int, tile_size: int, cap: int | None = None) -> int:
    """Number of sub-image tiles (global image excluded)."""
    if cap is not None:
        width, height = longest_edge_size(width, height, cap)
    rows, cols = grid_shape(width, height, tile_size)
    return 0 if rows == cols == 1 else rows * cols


def split_into_tiles(img: RawImage, tile_size: int, cap: int | None = None) -> TileGrid:
    if cap is not None:
        img = resize_longest_edge(img, cap)
    rows, cols = grid_shape(img.width, img.height, tile_size)
    global_image = resize_bilinear(img, tile_size, tile_size)
    if rows == cols == 1:
        return TileGrid([], global_image, 1, 1, tile_size, None)
    resized = resize_bilinear(img, cols * tile_size, rows * tile_size)
    tiles = []
    for r in range(rows):
        for c in range(cols):
            block = resized.data[r * tile_size:(r + 1) * tile_size, c * tile_size:(c + 1) * tile_size]
            tiles.append(Tile(r, c, RawImage(block.copy())))
    return TileGrid(tiles, global_image, rows, cols, tile_size, resized)


def reassemble_tiles(grid: TileGrid) -> RawImage:
    if not grid.tiles:
        return grid.global_image
    s = grid.tile_size
    out = np.zeros((grid.rows * s, grid.cols * s, 3), dtype=np.uint8)
    for t in grid.tiles:
        out[t.row * s:(t.row + 1) * s, t.col * s:(t.col + 1) * s] = t.image.data
    return RawImage(out)


def sample_indices(n_available: int, n: int) -> tuple[list[int], bool]:
    """Uniformly spaced frame indices; ``n == 1`` takes the middle frame."""
    if n < 1 or n_available < 1:
        raise ValueError("need n >= 1 and a nonempty source")
    clamped = n > n_available
    n = min(n, n_available)
    if n == 1:
        return [n_available // 2], clamped
    step = (n_available - 1) / (n - 1)
    return [_round_half_up(i * step) for i in range(n)], clamped


def sample_frames(frames: list[RawImage], duration: float, n: int, tile_size: int) -> FrameSet:
    if not frames:
        raise ValueError("frame source is empty")
    idx, clamped = sample_indices(len(frames), n)
    per_frame = duration / len(frames)
    return FrameSet(
        frames=[resize_bilinear(frames[i], tile_size, tile_size) for i in idx],
        source_timestamps=[i * per_frame for i in idx],
        indices=idx,
        clamped=clamped,
    )


def average_frames(fs: FrameSet, k: int) -> FrameSet:
    if k not in (1, 2, 4, 8):
        raise ValueError(f"averaging factor must be 1, 2, 4 or 8, got {k}")
    if len(fs) % k:
        raise ValueError(f"{len(fs)} frames are not divisible by k={k}")
    if k == 1:
        return FrameSet(list(fs.frames), list(fs.source_timestamps), list(fs.indices), fs.clamped)
    frames, stamps = [], []
    for g in range(0, len(fs), k):
        stack = np.stack([f.data.astype(np.float64) for f in fs.frames[g:g + k]])
        frames.append(RawImage(np.floor(stack.mean(axis=0) + 0.5).astype(np.uint8)))
        stamps.append(float(np.mean(fs.source_timestamps[g:g + k])))
    idx = fs.indices[::k] if fs.indices else []
    return FrameSet(frames, stamps, idx, fs.clamped)


def patchify(img: RawImage, patch: int) -> Tensor:
    """Raster-ordered flattened patches scaled to [0, 1]; each row is (py, px, channel)."""
    h, w = img.height, img.width
    if h % patch or w % patch:
        raise ValueError(f"image {w}x{h} is not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = img.data.astype(np.float64) / 255.0
    x = x.reshape(gh, patch, gw, patch, 3).transpose(0, 2, 1, 3, 4)
    return Tensor(x.reshape(gh * gw, patch * patch * 3))


def unpatchify(patches: np.ndarray, patch: int, width: int, height: int) -> np.ndarray:
    gh, gw = height // patch, width // patch
    x = np.asarray(patches).reshape(gh, gw, patch, patch, 3).transpose(0, 2, 1, 3, 4)
    return x.reshape(height, width, 3)


# ---------------------------------------------------------------------------
# I/O: binary PPM (P6) and a directory-of-frames video stand-in

_PPM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_ppm(path: str | Path) -> RawImage:
    raw = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _PPM_TOKEN.match(raw, pos)
        if not m:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = fields
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    body = raw[pos:pos + need]
    if len(body) != need:
        raise ValueError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    return RawImage(np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy())


def write_ppm(img: RawImage, path: str | Path) -> None:
    header = f"P6\n{img.width} {img.height}\n255\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(img.data).tobytes())


def write_video_dir(frames: list[RawImage], fps: float, path: str | Path) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        write_ppm(f, d / f"frame_{i:05d}.ppm")
    write_kv(d / "manifest.txt", {"fps": fps, "duration": len(frames) / fps, "frames": len(frames)})


def read_video_dir(path: str | Path) -> tuple[list[RawImage], float]:
    """Return (frames, duration_seconds)."""
    d = Path(path)
    meta = read_kv(d / "manifest.txt")
    frames = [read_ppm(p) for p in sorted(d.glob("frame_*.ppm"))]
    if not frames:
        raise ValueError(f"{d}: no frames")
    if "duration" in meta:
        duration = float(meta["duration"])
    else:
        duration = len(frames) / float(meta["fps"])
    return frames, duration
