"""Procedural datasets: shape captioning, dot-direction videos and glyph grids.

Everything is generated from a seed so experiments need no external data.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .kvfile import read_kv, write_kv
from .prompt import ConversationRecord, read_conversations, write_conversations
from .vision import FrameSet, RawImage, TileGrid, read_ppm, read_video_dir, sample_frames, split_into_tiles, write_ppm, write_video_dir

COLORS = {"red": (220, 40, 40), "green": (40, 200, 60), "blue": (50, 80, 230), "yellow": (230, 220, 50)}
SHAPES = ("square", "circle", "triangle", "cross")
SIDES = ("left", "right")
GLYPHS = ("bar", "dash", "ring", "dot")

CAPTION_QUESTION = "Describe the image."
DIRECTION_QUESTION = "Which way does the dot move?"
GRID_QUESTION = "Read the grid."
VISUAL_SYSTEM = "You are a visual agent and should provide concise answers."

Media = Union[RawImage, list[RawImage]]


@dataclass
class Example:
    id: str
    media: Media  # one image, or the frames of a video
    question: str
    answer: str


def task_texts() -> list[str]:
    """Every string the synthetic tasks can emit, for building word vocabularies."""
    out = [CAPTION_QUESTION, DIRECTION_QUESTION, GRID_QUESTION, VISUAL_SYSTEM, "left.", "right."]
    out += [caption(c, s, side) for c in COLORS for s in SHAPES for side in SIDES]
    out += [" ".join(GLYPHS), " " + " ".join(GLYPHS) + "."]
    return out


def caption(color: str, shape: str, side: str) -> str:
    return f"a {color} {shape} on the {side}."


def _shape_mask(shape: str, size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if shape == "square":
        return (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    if shape == "circle":
        return dx * dx + dy * dy <= radius * radius
    if shape == "triangle":
        return (dy >= -radius) & (dy <= radius) & (np.abs(dx) <= (dy + radius) / 2)
    if shape == "cross":
        arm = max(1.0, radius / 3)
        box = (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
        return box & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))
    raise ValueError(f"unknown shape {shape!r}")


def draw_shape(color: str, shape: str, side: str, size: int = 32,
               rng: np.random.Generator | None = None) -> RawImage:
    """A shape in the left or right half; ``rng`` adds jitter and background noise."""
    img = np.full((size, size, 3), 24.0)
    half = size / 2
    cx = half / 2 - 0.5 + (half if side == "right" else 0.0)
    cy = size / 2 - 0.5
    radius = size * 0.19
    rgb = np.asarray(COLORS[color], dtype=np.float64)
    if rng is not None:
        cx += rng.uniform(-1.5, 1.5)
        cy += rng.uniform(-size / 6, size / 6)
        radius *= rng.uniform(0.85, 1.1)
        img += rng.normal(0, 6, img.shape)
        rgb = rgb + rng.normal(0, 12, 3)
    img[_shape_mask(shape, size, cx, cy, radius)] = rgb
    return RawImage(np.clip(np.round(img), 0, 255).astype(np.uint8))


def captioning_set(size: int = 32) -> list[Example]:
    """The 32 colour x shape x side combinations, drawn without noise."""
    out = []
    for i, (c, s, side) in enumerate(itertools.product(COLORS, SHAPES, SIDES)):
        out.append(Example(f"cap{i:03d}", draw_shape(c, s, side, size), CAPTION_QUESTION, caption(c, s, side)))
    return out


def captioning_heldout(n: int, seed: int, size: int = 32) -> list[Example]:
    rng = np.random.default_rng(seed)
    combos = list(itertools.product(COLORS, SHAPES, SIDES))
    out = []
    for i in range(n):
        c, s, side = combos[i % len(combos)]
        out.append(Example(f"held{i:03d}", draw_shape(c, s, side, size, rng), CAPTION_QUESTION, caption(c, s, side)))
    return out


def dot_video(direction: str, n_frames: int, size: int, rng: np.random.Generator) -> list[RawImage]:
    """A dot crossing the frame horizontally; ``direction`` is where it ends up."""
    bg = rng.integers(0, 90, 3)
    fg = rng.integers(160, 256, 3)
    dot = max(2, size // 4)
    y = int(rng.integers(0, size - dot + 1))
    xs = np.round(np.linspace(0, size - dot, n_frames)).astype(int)
    if direction == "left":
        xs = xs[::-1]
    frames = []
    for x in xs:
        f = np.empty((size, size, 3), dtype=np.uint8)
        f[:] = bg
        f[y:y + dot, x:x + dot] = fg
        frames.append(RawImage(f))
    return frames


def direction_set(n: int, seed: int, n_frames: int = 8, size: int = 16) -> list[Example]:
    """Balanced dot-direction videos; held-out sets pair every clip with its time reversal."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(0, n, 2):
        state = rng.bit_generator.state
        right = dot_video("right", n_frames, size, rng)
        rng.bit_generator.state = state
        left = dot_video("left", n_frames, size, rng)
        out.append(Example(f"dir{i:03d}", right, DIRECTION_QUESTION, "right."))
        out.append(Example(f"dir{i + 1:03d}", left, DIRECTION_QUESTION, "left."))
    return out[:n]


def _glyph(name: str, size: int, fg, bg) -> np.ndarray:
    g = np.empty((size, size, 3), dtype=np.uint8)
    g[:] = bg
    c = size // 2
    w = max(1, size // 8)
    yy, xx = np.mgrid[0:size, 0:size]
    if name == "bar":
        m = (np.abs(xx - c + 0.5) <= w) & (yy >= 2) & (yy < size - 2)
    elif name == "dash":
        m = (np.abs(yy - c + 0.5) <= w) & (xx >= 2) & (xx < size - 2)
    elif name == "ring":
        r = np.hypot(xx - c + 0.5, yy - c + 0.5)
        m = (r <= size * 0.4) & (r >= size * 0.4 - 1.5 * w)
    elif name == "dot":
        m = np.hypot(xx - c + 0.5, yy - c + 0.5) <= size * 0.22
    else:
        raise ValueError(name)
    g[m] = fg
    return g


def grid_image(cells: tuple[str, ...], rows: int, cols: int, cell: int, rng: np.random.Generator) -> RawImage:
    img = np.zeros((rows * cell, cols * cell, 3), dtype=np.uint8)
    for k, name in enumerate(cells):
        r, c = divmod(k, cols)
        fg = rng.integers(170, 256, 3)
        bg = rng.integers(0, 70, 3)
        img[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = _glyph(name, cell, fg, bg)
    return RawImage(img)


def grid_answer(cells: tuple[str, ...]) -> str:
    return " ".join(cells) + "."


def glyph_grid_set(n: int, seed: int, rows: int = 2, cols: int = 2, cell: int = 16,
                   exclude: set[tuple[str, ...]] | None = None) -> list[Example]:
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        cells = tuple(GLYPHS[i] for i in rng.integers(0, len(GLYPHS), rows * cols))
        if exclude and cells in exclude:
            continue
        out.append(Example(f"grid{len(out):03d}", grid_image(cells, rows, cols, cell, rng), GRID_QUESTION,
                           grid_answer(cells)))
    return out


def grid_cells(example: Example) -> tuple[str, ...]:
    return tuple(example.answer.rstrip(".").split())


# ---------------------------------------------------------------------------
# on-disk datasets: media files + conversations.jsonl + manifest.txt


def write_dataset(path: str | Path, examples: list[Example], task: str, seed: int,
                  system: str | None = VISUAL_SYSTEM, fps: float = 4.0) -> None:
    d = Path(path)
    (d / "media").mkdir(parents=True, exist_ok=True)
    records = []
    for ex in examples:
        if isinstance(ex.media, RawImage):
            rel = f"media/{ex.id}.ppm"
            write_ppm(ex.media, d / rel)
        else:
            rel = f"media/{ex.id}"
            write_video_dir(ex.media, fps, d / rel)
        if system is not None:
            records.append(ConversationRecord(ex.id, "system", system, []))
        records.append(ConversationRecord(ex.id, "user", ex.question, [rel]))
        records.append(ConversationRecord(ex.id, "assistant", ex.answer, []))
    write_conversations(d / "conversations.jsonl", records)
    write_kv(d / "manifest.txt", {"task": task, "samples": len(examples), "seed": seed})


@dataclass
class LoadedSample:
    id: str
    system: str | None
    media: list[Union[TileGrid, FrameSet]]
    question: str
    answer: str


def load_dataset(path: str | Path, tile_size: int, cap: int | None = None,
                 frames_per_video: int = 8) -> tuple[dict[str, str], list[LoadedSample]]:
    d = Path(path)
    manifest = read_kv(d / "manifest.txt")
    convs = read_conversations(d / "conversations.jsonl")
    out = []
    for cid, recs in convs.items():
        system = next((r.text for r in recs if r.role == "system"), None)
        user = [r for r in recs if r.role == "user"]
        asst = [r for r in recs if r.role == "assistant"]
        if len(user) != 1 or len(asst) != 1:
            raise ValueError(f"{d}: sample {cid} needs exactly one user and one assistant record")
        media = []
        for rel in user[0].media:
            p = d / rel
            if p.is_dir():
                frames, duration = read_video_dir(p)
                media.append(sample_frames(frames, duration, frames_per_video, tile_size))
            else:
                media.append(split_into_tiles(read_ppm(p), tile_size, cap))
        out.append(LoadedSample(cid, system, media, user[0].text, asst[0].text))
    return manifest, out
