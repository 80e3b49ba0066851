"""Vocabulary, media blocks and chat rendering with completion-only loss masks."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .vision import FrameSet, RawImage, TileGrid

PAD = "<pad>"
SYSTEM = "<|system|>"
USER = "<|user|>"
ASSISTANT = "<|assistant|>"
EOU = "<end_of_utterance>"
IMAGE = "<image>"
GLOBAL_IMG = "<global-img>"
FAKE_AROUND = "<fake_token_around_image>"

ROLE_MARKERS = {"system": SYSTEM, "user": USER, "assistant": ASSISTANT}
MAX_GRID = 8

_PIECE = re.compile(r" ?[A-Za-z]+|\d|\s|[^\sA-Za-z\d]")


class ChatError(ValueError):
    """Malformed conversation structure."""


class GridOverflowError(ValueError):
    """Tile grid larger than the vocabulary's positional tokens allow."""


class ContextOverflowError(ValueError):
    """A rendered sequence cannot be made to fit the context limit."""


class PositionMode(str, Enum):
    LEARNED = "learned"
    STRING = "string"


def position_token(row: int, col: int) -> str:
    """1-based grid coordinate marker, e.g. ``<row_1_col_2>``."""
    return f"<row_{row}_col_{col}>"


def split_pieces(text: str) -> list[str]:
    return _PIECE.findall(text)


class Vocab:
    """Dense id space: 256 byte tokens, word pieces, then named special tokens."""

    def __init__(self, words: Sequence[str] = (), specials: Sequence[str] = ()):
        self.tokens: list[str] = [f"<0x{b:02X}>" for b in range(256)]
        self.words: dict[str, int] = {}
        self.specials: dict[str, int] = {}
        for w in words:
            if w in self.words:
                raise ValueError(f"duplicate word {w!r}")
            self.words[w] = len(self.tokens)
            self.tokens.append(w)
        self._add_specials(specials)
        self.max_rows = 0
        self.max_cols = 0

    def _add_specials(self, names: Iterable[str]) -> None:
        for name in names:
            if name in self.specials:
                raise ValueError(f"duplicate special token {name!r}")
            self.specials[name] = len(self.tokens)
            self.tokens.append(name)
        self._special_re = (
            re.compile("|".join(re.escape(s) for s in sorted(self.specials, key=len, reverse=True)))
            if self.specials
            else None
        )

    @classmethod
    def from_corpus(cls, texts: Iterable[str]) -> "Vocab":
        """Base vocab whose word pieces are every piece seen in ``texts``.

        Role markers, end-of-utterance and padding are included; media and
        positional tokens come from :func:`extend_vocab`.
        """
        seen = set()
        for t in texts:
            seen.update(p for p in split_pieces(t) if p not in "<>_")
        return cls(sorted(seen), [PAD, SYSTEM, USER, ASSISTANT, EOU])

    def copy(self) -> "Vocab":
        v = Vocab.__new__(Vocab)
        v.tokens = list(self.tokens)
        v.words = dict(self.words)
        v.specials = dict(self.specials)
        v._special_re = self._special_re
        v.max_rows, v.max_cols = self.max_rows, self.max_cols
        return v

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, name: str) -> int:
        return self.specials[name]

    def encode(self, text: str, specials: bool | Iterable[str] = True) -> list[int]:
        """Encode text; ``specials`` limits which special-token strings are recognised."""
        if specials is True:
            allowed = self.specials
        elif specials is False:
            allowed = {}
        else:
            allowed = {s: self.specials[s] for s in specials}
        ids: list[int] = []
        if allowed and self._special_re is not None:
            pos = 0
            for m in self._special_re.finditer(text):
                if m.group(0) not in allowed:
                    continue
                ids.extend(self._encode_plain(text[pos:m.start()]))
                ids.append(allowed[m.group(0)])
                pos = m.end()
            ids.extend(self._encode_plain(text[pos:]))
            return ids
        return self._encode_plain(text)

    def _encode_plain(self, text: str) -> list[int]:
        ids: list[int] = []
        for piece in split_pieces(text):
            wid = self.words.get(piece)
            if wid is not None:
                ids.append(wid)
            else:
                ids.extend(piece.encode("utf-8"))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out: list[str] = []
        pending = bytearray()
        for i in ids:
            i = int(i)
            if i < 256:
                pending.append(i)
                continue
            if pending:
                out.append(pending.decode("utf-8", errors="replace"))
                pending.clear()
            out.append(self.tokens[i])
        if pending:
            out.append(pending.decode("utf-8", errors="replace"))
        return "".join(out)

    def to_json(self) -> str:
        return json.dumps({"words": list(self.words), "specials": list(self.specials),
                           "max_rows": self.max_rows, "max_cols": self.max_cols})

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        d = json.loads(text)
        v = cls(d["words"], d["specials"])
        v.max_rows, v.max_cols = d["max_rows"], d["max_cols"]
        return v


def extend_vocab(base: Vocab, max_rows: int, max_cols: int) -> Vocab:
    if not (1 <= max_rows <= MAX_GRID and 1 <= max_cols <= MAX_GRID):
        raise ValueError(f"grid extents must lie in [1, {MAX_GRID}], got {max_rows}x{max_cols}")
    v = base.copy()
    names = [IMAGE, GLOBAL_IMG, FAKE_AROUND]
    names += [position_token(r, c) for r in range(1, max_rows + 1) for c in range(1, max_cols + 1)]
    v._add_specials(names)
    v.max_rows, v.max_cols = max_rows, max_cols
    return v


# ---------------------------------------------------------------------------
# template


@dataclass(frozen=True)
class ChatTemplate:
    system_conv: str
    system_visual: str
    img_intro: str
    vid_intro: str
    outro: str

    @classmethod
    def parse(cls, text: str) -> "ChatTemplate":
        sections: dict[str, list[str]] = {}
        current = None
        for line in text.splitlines():
            if line.startswith("#"):
                continue
            m = re.fullmatch(r"\[([A-Z_]+)\]\s*", line)
            if m:
                current = m.group(1)
                sections[current] = []
            elif current is not None:
                sections[current].append(line)
        need = ["SYSTEM_CONV", "SYSTEM_VISUAL", "IMG_INTRO", "VID_INTRO", "OUTRO"]
        missing = [n for n in need if n not in sections]
        if missing:
            raise ValueError(f"template is missing sections {missing}")
        get = lambda n: "\n".join(sections[n]).strip()  # noqa: E731
        return cls(*(get(n) for n in need))

    @classmethod
    def load(cls, path: str | Path | None = None) -> "ChatTemplate":
        if path is None:
            text = resources.files("smolpipe").joinpath("templates/chat_template.txt").read_text()
        else:
            text = Path(path).read_text()
        return cls.parse(text)

    def video_intro(self, n: int) -> str:
        return self.vid_intro.replace("{N}", str(n))

    def outro_for(self, media: str) -> str:
        return self.outro.replace("{MEDIA}", media)

    def texts(self) -> list[str]:
        return [self.system_conv, self.system_visual, self.img_intro,
                self.vid_intro.replace("{N}", "0"), self.outro_for("image"), self.outro_for("video")]


def default_vocab(extra_texts: Iterable[str] = (), template: ChatTemplate | None = None,
                  max_rows: int = MAX_GRID, max_cols: int = MAX_GRID) -> Vocab:
    template = template or ChatTemplate.load()
    corpus = template.texts() + [f"Frame {i}:" for i in range(10)] + list(extra_texts)
    return extend_vocab(Vocab.from_corpus(corpus), max_rows, max_cols)


# ---------------------------------------------------------------------------
# media blocks


@dataclass
class Block:
    """Rendered token ids plus the relative offsets of every ``<image>`` placeholder."""

    ids: list[int]
    placeholders: list[int]
    images: list[RawImage] = field(default_factory=list)
    run_lengths: list[int] = field(default_factory=list)

    def extend(self, other: "Block") -> None:
        off = len(self.ids)
        self.ids.extend(other.ids)
        self.placeholders.extend(off + p for p in other.placeholders)
        self.images.extend(other.images)
        self.run_lengths.extend(other.run_lengths)


def _placeholder_run(vocab: Vocab, n: int, image: RawImage) -> Block:
    return Block([vocab[IMAGE]] * n, list(range(n)), [image], [n])


def _marker(vocab: Vocab, row: int, col: int, mode: PositionMode) -> list[int]:
    name = position_token(row, col)
    if PositionMode(mode) is PositionMode.LEARNED:
        return [vocab[name]]
    return vocab.encode(name, specials=False)


def render_image_block(grid: TileGrid, mode: PositionMode, vocab: Vocab, tokens_per_tile: int) -> Block:
    if grid.tiles and (grid.rows > vocab.max_rows or grid.cols > vocab.max_cols):
        raise GridOverflowError(
            f"grid {grid.rows}x{grid.cols} exceeds vocab positional tokens {vocab.max_rows}x{vocab.max_cols}"
        )
    block = Block([], [])
    for tile in grid.tiles:
        block.extend(Block(_marker(vocab, tile.row + 1, tile.col + 1, mode), []))
        block.extend(_placeholder_run(vocab, tokens_per_tile, tile.image))
    block.extend(Block([vocab[GLOBAL_IMG]], []))
    block.extend(_placeholder_run(vocab, tokens_per_tile, grid.global_image))
    return block


def render_video_block(fs: FrameSet, vocab: Vocab, tokens_per_frame: int,
                       template: ChatTemplate | None = None) -> Block:
    template = template or ChatTemplate.load()
    block = Block(vocab.encode(template.video_intro(len(fs)), specials=False), [])
    for i, frame in enumerate(fs.frames, start=1):
        block.extend(Block(vocab.encode(f"Frame {i}:", specials=False), []))
        block.extend(_placeholder_run(vocab, tokens_per_frame, frame))
    block.extend(Block(vocab.encode(template.outro_for("video"), specials=False), []))
    return block


# ---------------------------------------------------------------------------
# chats

Content = Union[str, TileGrid, FrameSet]


@dataclass
class Turn:
    role: str
    content: list[Content]

    def __init__(self, role: str, content: Content | Sequence[Content]):
        self.role = role
        if isinstance(content, (str, TileGrid, FrameSet)):
            content = [content]
        self.content = list(content)


@dataclass
class ChatConfig:
    mode: PositionMode = PositionMode.LEARNED
    tokens_per_tile: int = 64
    tokens_per_frame: int | None = None
    template: ChatTemplate = field(default_factory=ChatTemplate.load)

    @property
    def frame_tokens(self) -> int:
        return self.tokens_per_tile if self.tokens_per_frame is None else self.tokens_per_frame


@dataclass
class Segment:
    kind: str  # text | image_tiles | video_frames | marker
    role: str
    start: int
    end: int


@dataclass
class RenderedTurn:
    role: str
    ids: list[int]
    mask: list[bool]
    placeholders: list[int]
    images: list[RawImage]
    segments: list[Segment]
    run_lengths: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class MultimodalSequence:
    """Chat rendered into one token stream.

    ``turns`` keeps per-turn pieces so truncation can drop whole exchanges.
    Media images are listed in placeholder order, one entry per placeholder run.
    """

    turns: list[RenderedTurn]

    @property
    def token_ids(self) -> np.ndarray:
        return np.array([i for t in self.turns for i in t.ids], dtype=np.int64)

    @property
    def loss_mask(self) -> np.ndarray:
        return np.array([m for t in self.turns for m in t.mask], dtype=bool)

    @property
    def placeholder_positions(self) -> np.ndarray:
        out, off = [], 0
        for t in self.turns:
            out.extend(off + p for p in t.placeholders)
            off += len(t)
        return np.array(out, dtype=np.int64)

    @property
    def images(self) -> list[RawImage]:
        return [im for t in self.turns for im in t.images]

    @property
    def tokens_per_image(self) -> list[int]:
        return [n for t in self.turns for n in t.run_lengths]

    @property
    def segments(self) -> list[Segment]:
        out, off = [], 0
        for t in self.turns:
            out.extend(Segment(s.kind, s.role, s.start + off, s.end + off) for s in t.segments)
            off += len(t)
        return out

    def __len__(self) -> int:
        return sum(len(t) for t in self.turns)

    def groups(self) -> list[list[int]]:
        """Turn indices grouped as [system], then user/assistant exchanges."""
        out: list[list[int]] = []
        for i, t in enumerate(self.turns):
            if t.role == "system" or t.role == "user" or not out:
                out.append([i])
            else:
                out[-1].append(i)
        return out

    def with_turns(self, idx: Sequence[int]) -> "MultimodalSequence":
        return MultimodalSequence([self.turns[i] for i in idx])

    def append_text(self, ids: Sequence[int], role: str = "assistant") -> "MultimodalSequence":
        last = self.turns[-1]
        grown = RenderedTurn(last.role, last.ids + list(ids), last.mask + [False] * len(ids),
                             last.placeholders, last.images, last.segments, last.run_lengths)
        return MultimodalSequence(self.turns[:-1] + [grown])


def _render_turn(turn: Turn, vocab: Vocab, cfg: ChatConfig) -> RenderedTurn:
    role = turn.role
    ids = [vocab[ROLE_MARKERS[role]]]
    segments = [Segment("marker", role, 0, 1)]
    placeholders: list[int] = []
    images: list[RawImage] = []
    runs: list[int] = []
    for item in turn.content:
        start = len(ids)
        if isinstance(item, str):
            ids.extend(vocab.encode(item, specials=False))
            kind = "text"
        else:
            if role == "assistant":
                raise ChatError("media is only allowed in user turns")
            if isinstance(item, TileGrid):
                blk = Block(vocab.encode(cfg.template.img_intro, specials=False), [])
                blk.extend(render_image_block(item, cfg.mode, vocab, cfg.tokens_per_tile))
                blk.extend(Block(vocab.encode(cfg.template.outro_for("image"), specials=False), []))
                kind = "image_tiles"
            else:
                blk = render_video_block(item, vocab, cfg.frame_tokens, cfg.template)
                kind = "video_frames"
            placeholders.extend(start + p for p in blk.placeholders)
            images.extend(blk.images)
            runs.extend(blk.run_lengths)
            ids.extend(blk.ids)
        segments.append(Segment(kind, role, start, len(ids)))
    ids.append(vocab[EOU])
    segments.append(Segment("marker", role, len(ids) - 1, len(ids)))
    supervised = role == "assistant"
    mask = [False] + [supervised] * (len(ids) - 1)
    return RenderedTurn(role, ids, mask, placeholders, images, segments, runs)


def build_chat(system: str | None, turns: Sequence[Turn], vocab: Vocab, config: ChatConfig | None = None,
               add_generation_prompt: bool = False) -> MultimodalSequence:
    """Render a conversation; the loss mask covers assistant content and its end-of-utterance."""
    cfg = config or ChatConfig()
    if not turns:
        raise ChatError("conversation has no turns")
    expected = "user"
    for t in turns:
        if t.role not in ("user", "assistant"):
            raise ChatError(f"unexpected role {t.role!r}; the system prompt is passed separately")
        if t.role != expected:
            if t.role == "assistant" and expected == "user":
                raise ChatError("conversation must start with a user turn and alternate user/assistant")
            raise ChatError(f"expected a {expected} turn, got {t.role}")
        expected = "assistant" if expected == "user" else "user"
    rendered = []
    if system is not None:
        rendered.append(_render_turn(Turn("system", system), vocab, cfg))
    rendered.extend(_render_turn(t, vocab, cfg) for t in turns)
    if add_generation_prompt:
        if turns[-1].role != "user":
            raise ChatError("generation prompt must follow a user turn")
        rendered.append(RenderedTurn("assistant", [vocab[ASSISTANT]], [False], [], [],
                                     [Segment("marker", "assistant", 0, 1)]))
    return MultimodalSequence(rendered)


def truncate_to_context(seq: MultimodalSequence, limit: int) -> MultimodalSequence:
    """Drop the oldest whole exchanges until the stream fits; the system turn always stays."""
    if limit < 1:
        raise ValueError("limit must be >= 1")
    if len(seq) <= limit:
        return seq
    groups = seq.groups()
    head = groups[0] if seq.turns[0].role == "system" else []
    rest = groups[1:] if head else groups
    head_len = sum(len(seq.turns[i]) for i in head)
    while rest:
        body = [i for g in rest for i in g]
        if head_len + sum(len(seq.turns[i]) for i in body) <= limit:
            return seq.with_turns(head + body)
        if len(rest) == 1:
            break
        rest = rest[1:]
    last_len = sum(len(seq.turns[i]) for g in rest for i in g)
    raise ContextOverflowError(
        f"the newest exchange alone needs {head_len + last_len} tokens, above the limit of {limit}"
    )


# ---------------------------------------------------------------------------
# conversation records: one JSON object per line, {id, role, text, media}


@dataclass
class ConversationRecord:
    id: str
    role: str
    text: str
    media: list[str]


def read_conversations(path: str | Path) -> dict[str, list[ConversationRecord]]:
    out: dict[str, list[ConversationRecord]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rec = ConversationRecord(str(d.get("id", "0")), d["role"], d.get("text", ""), list(d.get("media", [])))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad conversation record ({exc})") from None
            out.setdefault(rec.id, []).append(rec)
    return out


def write_conversations(path: str | Path, records: Iterable[ConversationRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.id, "role": r.role, "text": r.text, "media": r.media}) + "\n")
