"""Token, memory and data-mixture accounting for pipeline configurations."""

from __future__ import annotations

import csv
import io
import math
import random
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .kvfile import KVFormatError, parse_kv_lines
from .prompt import PositionMode, Vocab, default_vocab, position_token
from .vision import grid_shape, longest_edge_size

ENCODER_DOMINANT = "encoder-dominant"
BALANCED = "balanced"
LM_DOMINANT = "lm-dominant"

# Fixed runtime allowance (allocator slack, kernels, tokenizer) added to every RAM estimate.
RUNTIME_OVERHEAD_BYTES = 256 * 2**20
# Live activation tensors per token at peak, in units of d_model scalars.
ACTIVATION_WIDTH = 16

PRESET_NAMES = ("smolvlm-256m", "smolvlm-500m", "smolvlm-2.2b")


class GeometryError(ValueError):
    """Tile, patch and shuffle factor do not divide evenly."""


@dataclass
class PipelineConfig:
    name: str = "custom"
    encoder_params: int = 93_000_000
    lm_params: int = 135_000_000
    tile_size: int = 512
    patch: int = 16
    shuffle_r: int = 4
    longest_edge_cap: int = 1920
    context_limit: int = 8192
    frames_per_video: int = 8
    tokens_per_frame: int = 0  # 0 means one tile's post-shuffle count
    n_layers_lm: int = 30
    n_heads: int = 9
    n_kv_heads: int = 3
    head_dim: int = 64
    d_model: int = 576
    bytes_per_param: int = 2

    def __post_init__(self):
        for f in fields(self):
            if f.type in ("int", int) and f.name != "tokens_per_frame" and getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        if self.tile_size % self.patch or (self.tile_size // self.patch) % self.shuffle_r:
            raise GeometryError(f"tile {self.tile_size}, patch {self.patch} and r={self.shuffle_r} are incompatible")

    @property
    def total_params(self) -> int:
        return self.encoder_params + self.lm_params

    @property
    def tokens_per_tile(self) -> int:
        return (self.tile_size // self.patch) ** 2 // self.shuffle_r ** 2

    @property
    def frame_tokens(self) -> int:
        return self.tokens_per_frame or self.tokens_per_tile

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "PipelineConfig":
        entries = parse_kv_lines(text, source)
        types = {f.name: f.type for f in fields(cls)}
        kw: dict[str, object] = {}
        for key, (value, lineno) in entries.items():
            if key not in types:
                raise KVFormatError(source, lineno, f"unknown key {key!r}")
            try:
                kw[key] = value if key == "name" else int(float(value))
            except ValueError:
                raise KVFormatError(source, lineno, f"{key} needs a number, got {value!r}") from None
            if key not in ("name", "tokens_per_frame") and kw[key] <= 0:
                raise KVFormatError(source, lineno, f"{key} must be positive, got {value}")
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_text(Path(path).read_text(), source=str(path))

    @classmethod
    def preset(cls, name: str) -> "PipelineConfig":
        text = resources.files("smolpipe").joinpath(f"presets/{name}.txt").read_text()
        return cls.from_text(text, source=name)


@dataclass
class Workload:
    image_width: int = 1920
    image_height: int = 1080
    images: int = 1
    videos: int = 0
    text_tokens: int = 256
    batch: int = 1
    bytes_per_scalar: int = 2

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "Workload":
        entries = parse_kv_lines(text, source)
        names = {f.name for f in fields(cls)}
        kw = {}
        for key, (value, lineno) in entries.items():
            if key not in names:
                raise KVFormatError(source, lineno, f"unknown key {key!r}")
            try:
                kw[key] = int(value)
            except ValueError:
                raise KVFormatError(source, lineno, f"{key} needs an integer, got {value!r}") from None
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | Path) -> "Workload":
        return cls.from_text(Path(path).read_text(), source=str(path))


# ---------------------------------------------------------------------------
# tokens


@dataclass
class ImageTokens:
    rows: int
    cols: int
    tiles: int
    visual_tokens: int
    marker_tokens: int

    @property
    def subimages(self) -> int:
        return self.tiles + 1

    @property
    def total(self) -> int:
        return self.visual_tokens + self.marker_tokens


_VOCAB: Vocab | None = None


def _string_vocab() -> Vocab:
    global _VOCAB
    if _VOCAB is None:
        _VOCAB = default_vocab()
    return _VOCAB


def marker_tokens(rows: int, cols: int, tiles: int, mode: PositionMode = PositionMode.LEARNED,
                  vocab: Vocab | None = None) -> int:
    """Positional markers plus the global-image marker for one image block."""
    if PositionMode(mode) is PositionMode.LEARNED or tiles == 0:
        return tiles + 1
    vocab = vocab or _string_vocab()
    per = sum(len(vocab.encode(position_token(r, c), specials=False))
              for r in range(1, rows + 1) for c in range(1, cols + 1))
    return per + 1


def image_token_count(cfg: PipelineConfig, width: int, height: int,
                      mode: PositionMode = PositionMode.LEARNED, vocab: Vocab | None = None) -> ImageTokens:
    w, h = longest_edge_size(width, height, cfg.longest_edge_cap)
    rows, cols = grid_shape(w, h, cfg.tile_size)
    tiles = 0 if rows == cols == 1 else rows * cols
    visual = (tiles + 1) * cfg.tokens_per_tile
    return ImageTokens(rows, cols, tiles, visual, marker_tokens(rows, cols, tiles, mode, vocab))


def video_token_count(cfg: PipelineConfig) -> int:
    """Visual tokens for one video: frames are not tiled, each costs one tile's tokens."""
    return cfg.frames_per_video * cfg.frame_tokens


# ---------------------------------------------------------------------------
# memory


def kv_cache_bytes(cfg, seq_len: int, batch: int, bytes_per_scalar: int) -> int:
    """Keys and values for every LM layer: 2·layers·kv_heads·head_dim·seq·batch·bytes."""
    kv_heads = getattr(cfg, "n_kv_heads", None) or cfg.n_heads
    return 2 * cfg.n_layers_lm * kv_heads * cfg.head_dim * seq_len * batch * bytes_per_scalar


def param_bytes(cfg: PipelineConfig) -> int:
    return cfg.total_params * cfg.bytes_per_param


def activation_bytes(cfg: PipelineConfig, seq_len: int, batch: int, bytes_per_scalar: int) -> int:
    return ACTIVATION_WIDTH * cfg.d_model * seq_len * batch * bytes_per_scalar


@dataclass
class Allocation:
    encoder_params: int
    lm_params: int
    ratio: float
    regime: str


def allocation_report(encoder_params: float, lm_params: float) -> Allocation:
    if encoder_params <= 0 or lm_params <= 0:
        raise ValueError("parameter counts must be positive")
    ratio = encoder_params / (encoder_params + lm_params)
    if ratio > 0.5:
        regime = ENCODER_DOMINANT
    elif ratio < 0.2:
        regime = LM_DOMINANT
    else:
        regime = BALANCED
    return Allocation(int(encoder_params), int(lm_params), ratio, regime)


def encoder_swap_increase(small_encoder: float, large_encoder: float, lm_params: float) -> float:
    """Relative growth in total parameters when the small encoder is replaced by the large one."""
    return (large_encoder - small_encoder) / (small_encoder + lm_params)


# ---------------------------------------------------------------------------
# reports


@dataclass
class BudgetReport:
    config: str
    total_params: int
    encoder_ratio: float
    regime: str
    tiles: int
    image_visual_tokens: int
    image_tokens: int
    video_tokens: int
    seq_len: int
    context_limit: int
    context_occupancy: float
    over_context: bool
    kv_bytes: int
    param_bytes: int
    activation_bytes: int
    ram_bytes: int

    @property
    def ram_gb(self) -> float:
        return self.ram_bytes / 1e9


def budget_report(cfg: PipelineConfig, workload: Workload,
                  mode: PositionMode = PositionMode.LEARNED) -> BudgetReport:
    img = image_token_count(cfg, workload.image_width, workload.image_height, mode)
    video = video_token_count(cfg)
    seq = workload.images * img.total + workload.videos * video + workload.text_tokens
    kv = kv_cache_bytes(cfg, seq, workload.batch, workload.bytes_per_scalar)
    pb = param_bytes(cfg)
    act = activation_bytes(cfg, seq, workload.batch, workload.bytes_per_scalar)
    alloc = allocation_report(cfg.encoder_params, cfg.lm_params)
    occ = seq / cfg.context_limit
    return BudgetReport(
        config=cfg.name, total_params=cfg.total_params, encoder_ratio=round(alloc.ratio, 6), regime=alloc.regime,
        tiles=img.tiles, image_visual_tokens=img.visual_tokens, image_tokens=img.total, video_tokens=video,
        seq_len=seq, context_limit=cfg.context_limit, context_occupancy=round(occ, 6), over_context=occ > 1,
        kv_bytes=kv, param_bytes=pb, activation_bytes=act, ram_bytes=pb + kv + act + RUNTIME_OVERHEAD_BYTES,
    )


def compare_configs(configs: Sequence[PipelineConfig], workload: Workload,
                    mode: PositionMode = PositionMode.LEARNED) -> list[BudgetReport]:
    """One report per config, stably ordered by total parameter count."""
    if not configs:
        raise ValueError("need at least one config")
    rows = [budget_report(c, workload, mode) for c in configs]
    return sorted(rows, key=lambda r: r.total_params)


def reports_to_csv(rows: Iterable[BudgetReport]) -> str:
    buf = io.StringIO()
    names = [f.name for f in fields(BudgetReport)]
    w = csv.DictWriter(buf, fieldnames=names, lineterminator="\r\n")
    w.writeheader()
    for r in rows:
        w.writerow(asdict(r))
    return buf.getvalue()


# ---------------------------------------------------------------------------
# data mixtures


@dataclass
class MixtureSpec:
    fractions: dict[str, float]
    seed: int = 0

    def __post_init__(self):
        if not self.fractions:
            raise ValueError("mixture needs at least one category")
        for k, v in self.fractions.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"fraction for {k!r} must lie in [0, 1], got {v}")
        total = sum(self.fractions.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"fractions sum to {total}, expected 1")


@dataclass
class MixturePlan:
    sequence: list[str]
    counts: dict[str, int]
    sparse_warning: bool = False
    targets: dict[str, float] = field(default_factory=dict)

    def realized(self, prefix: int | None = None) -> dict[str, float]:
        seq = self.sequence if prefix is None else self.sequence[:prefix]
        n = max(1, len(seq))
        return {k: seq.count(k) / n for k in self.counts}


def largest_remainder(fractions: Mapping[str, float], n: int, priority: Sequence[str]) -> dict[str, int]:
    """Hamilton apportionment of ``n`` slots; ties on remainder go by ``priority`` order."""
    quotas = {k: n * f for k, f in fractions.items()}
    base = {k: int(math.floor(q + 1e-9)) for k, q in quotas.items()}
    left = n - sum(base.values())
    rank = {k: i for i, k in enumerate(priority)}
    order = sorted(fractions, key=lambda k: (-round(quotas[k] - base[k], 9), rank[k]))
    for k in order[:left]:
        base[k] += 1
    return base


def plan_mixture(spec: MixtureSpec, n_samples: int) -> MixturePlan:
    """Deterministic low-discrepancy category schedule.

    Final counts are the largest-remainder apportionment of ``n_samples``. Each
    position goes to the category whose running count lags its share the most,
    so every prefix tracks the target fractions.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    cats = list(spec.fractions)
    priority = cats[:]
    random.Random(spec.seed).shuffle(priority)
    rank = {k: i for i, k in enumerate(priority)}
    counts = largest_remainder(spec.fractions, n_samples, priority)
    taken = {k: 0 for k in cats}
    seq: list[str] = []
    for i in range(1, n_samples + 1):
        # lag scaled by n: i·count_k − n·taken_k, exact in integers
        best = max((k for k in cats if taken[k] < counts[k]),
                   key=lambda k: (i * counts[k] - n_samples * taken[k], -rank[k]))
        taken[best] += 1
        seq.append(best)
    positive = [f for f in spec.fractions.values() if f > 0]
    warn = bool(positive) and n_samples < 1.0 / min(positive)
    return MixturePlan(seq, counts, warn, dict(spec.fractions))
