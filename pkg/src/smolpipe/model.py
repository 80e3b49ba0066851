"""Desk-scale vision-language model on the in-house tensor engine.

Patch-embedding ViT encoder -> pixel shuffle -> 2-layer MLP projector ->
causal decoder with rotary position embeddings. Parameters live in a flat
``dict[str, Tensor]`` so checkpoints are just one tensor file per name.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .compress import VisualFeatureMap, flatten_tokens, pixel_shuffle
from .kvfile import read_kv, write_kv
from .prompt import EOU, PAD, MultimodalSequence, Vocab
from .tensor import ShapeError, Tensor, load_tensor, no_grad, save_tensor
from .vision import RawImage, patchify

Params = dict[str, Tensor]


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_vision: int = 32
    d_model: int = 64
    n_layers_vision: int = 1
    n_layers_lm: int = 2
    n_heads: int = 4
    head_dim: int = 16
    vocab_size: int = 512
    patch: int = 8
    tile_size: int = 32
    shuffle_r: int = 2
    rope_base: float = 10_000.0
    context_limit: int = 8192
    n_heads_vision: int = 2
    ffn_mult: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(f"d_model {self.d_model} != n_heads*head_dim {self.n_heads}*{self.head_dim}")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if self.tile_size % self.patch:
            raise ConfigError(f"tile_size {self.tile_size} not divisible by patch {self.patch}")
        if (self.tile_size // self.patch) % self.shuffle_r:
            raise ConfigError(f"patch grid {self.tile_size // self.patch} not divisible by shuffle_r {self.shuffle_r}")
        if self.context_limit not in (8192, 16384):
            raise ConfigError(f"context_limit must be 8192 or 16384, got {self.context_limit}")
        if self.d_vision % self.n_heads_vision:
            raise ConfigError("d_vision must be divisible by n_heads_vision")

    @property
    def grid_side(self) -> int:
        return self.tile_size // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def tokens_per_tile(self) -> int:
        return self.n_patches // self.shuffle_r ** 2

    def to_kv(self) -> dict[str, object]:
        return asdict(self)

    @classmethod
    def from_kv(cls, d: dict[str, str]) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = float(d[f.name]) if f.name == "rope_base" else int(d[f.name])
        return cls(**kw)


# Three widths at roughly 1/1000 of the released 256M / 500M / 2.2B variants.
TOY_LADDER = {
    "256m": dict(d_vision=32, d_model=64, n_heads=4, head_dim=16, n_layers_lm=2),
    "500m": dict(d_vision=32, d_model=96, n_heads=6, head_dim=16, n_layers_lm=2),
    "2.2b": dict(d_vision=64, d_model=192, n_heads=12, head_dim=16, n_layers_lm=3, context_limit=16384),
}


# ---------------------------------------------------------------------------
# parameters


def _block_shapes(prefix: str, d: int, mult: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.ln1_g": (d,), f"{prefix}.ln1_b": (d,),
        f"{prefix}.wq": (d, d), f"{prefix}.bq": (d,),
        f"{prefix}.wk": (d, d), f"{prefix}.bk": (d,),
        f"{prefix}.wv": (d, d), f"{prefix}.bv": (d,),
        f"{prefix}.wo": (d, d), f"{prefix}.bo": (d,),
        f"{prefix}.ln2_g": (d,), f"{prefix}.ln2_b": (d,),
        f"{prefix}.w1": (d, mult * d), f"{prefix}.b1": (mult * d,),
        f"{prefix}.w2": (mult * d, d), f"{prefix}.b2": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    p2 = cfg.patch * cfg.patch * 3
    dv, d = cfg.d_vision, cfg.d_model
    shapes = {"vision.patch_w": (p2, dv), "vision.patch_b": (dv,), "vision.pos": (cfg.n_patches, dv)}
    for i in range(cfg.n_layers_vision):
        shapes.update(_block_shapes(f"vision.{i}", dv, cfg.ffn_mult))
    c_in = dv * cfg.shuffle_r ** 2
    shapes.update({"proj.w1": (c_in, d), "proj.b1": (d,), "proj.w2": (d, d), "proj.b2": (d,)})
    shapes["lm.embed"] = (cfg.vocab_size, d)
    for i in range(cfg.n_layers_lm):
        shapes.update(_block_shapes(f"lm.{i}", d, cfg.ffn_mult))
    shapes.update({"lm.lnf_g": (d,), "lm.lnf_b": (d,), "lm.head": (d, cfg.vocab_size)})
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("_b"):
            arr = np.zeros(shape)
        elif leaf in ("embed", "pos"):
            arr = rng.normal(0.0, 0.02, shape)
        else:
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


def param_counts(params: Params) -> dict[str, int]:
    counts = {"vision": 0, "projector": 0, "lm": 0}
    tower = {"vision": "vision", "proj": "projector", "lm": "lm"}
    for name, t in params.items():
        counts[tower[name.split(".", 1)[0]]] += t.data.size
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------------------
# rotary embeddings


def rope_angles(positions, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    if head_dim % 2:
        raise ShapeError(f"rotary embeddings need an even head_dim, got {head_dim}")
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = pos[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def apply_rope(q: Tensor, k: Tensor, positions, base: float,
               context_limit: int | None = None) -> tuple[Tensor, Tensor]:
    """Rotate (2i, 2i+1) pairs of q and k by ``position * base**(-2i/head_dim)``."""
    positions = np.asarray(positions)
    if context_limit is not None and positions.size and positions.max() >= context_limit:
        raise ValueError(f"position {positions.max()} beyond context limit {context_limit}")
    cos, sin = rope_angles(positions, q.shape[-1], base)
    cos, sin = cos.astype(q.dtype), sin.astype(q.dtype)
    return ops.rotary(q, cos, sin), ops.rotary(k, cos, sin)


# ---------------------------------------------------------------------------
# blocks


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, D = x.shape
    x = ops.reshape(x, (B, T, n_heads, D // n_heads))
    return ops.transpose(x, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, T, hd = x.shape
    return ops.permute_reshape(x, (0, 2, 1, 3), (B, T, H * hd))


def attention(x: Tensor, p: Params, prefix: str, n_heads: int, causal: bool,
              rope: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    q = _split_heads(ops.linear(x, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), n_heads)
    k = _split_heads(ops.linear(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), n_heads)
    v = _split_heads(ops.linear(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), n_heads)
    if rope is not None:
        cos, sin = rope
        q, k = ops.rotary(q, cos, sin), ops.rotary(k, cos, sin)
    hd = q.shape[-1]
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    if causal:
        T = x.shape[1]
        future = np.triu(np.ones((T, T), dtype=bool), k=1)
        scores = ops.masked_fill(scores, future, -1e30)
    att = ops.softmax(scores, axis=-1)
    out = _merge_heads(ops.matmul(att, v))
    return ops.linear(out, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def block(x: Tensor, p: Params, prefix: str, n_heads: int, causal: bool,
          rope: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
    h = ops.layer_norm(x, p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"])
    x = ops.add(x, attention(h, p, prefix, n_heads, causal, rope))
    h = ops.layer_norm(x, p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])
    h = ops.gelu(ops.linear(h, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return ops.add(x, ops.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"]))


# ---------------------------------------------------------------------------
# towers


def encode_tile(patches: Tensor, params: Params, cfg: ModelConfig) -> VisualFeatureMap:
    """Patch vectors ``[n, p²·3]`` (or ``[B, n, p²·3]``) to a ``side×side×d_vision`` map."""
    batched = patches.ndim == 3
    x = patches if batched else ops.reshape(patches, (1, *patches.shape))
    B, n, _ = x.shape
    if n != cfg.n_patches:
        raise ShapeError(f"expected {cfg.n_patches} patches per tile, got {n}")
    h = ops.linear(x, params["vision.patch_w"], params["vision.patch_b"])
    h = ops.add(h, ops.broadcast_to(params["vision.pos"], h.shape))
    for i in range(cfg.n_layers_vision):
        h = block(h, params, f"vision.{i}", cfg.n_heads_vision, causal=False)
    s = cfg.grid_side
    shape = (B, s, s, cfg.d_vision) if batched else (s, s, cfg.d_vision)
    return VisualFeatureMap(ops.reshape(h, shape))


def project(m: VisualFeatureMap | Tensor, params: Params, cfg: ModelConfig) -> Tensor:
    """Per-token MLP from shuffled channels to ``d_model``; returns ``[..., tokens, d_model]``."""
    expected = cfg.d_vision * cfg.shuffle_r ** 2
    c = m.c if isinstance(m, VisualFeatureMap) else m.shape[-1]
    if c != expected:
        raise ShapeError(f"projector expects {expected} channels, got {c}")
    tokens = flatten_tokens(m) if isinstance(m, VisualFeatureMap) else m
    h = ops.gelu(ops.linear(tokens, params["proj.w1"], params["proj.b1"]))
    return ops.linear(h, params["proj.w2"], params["proj.b2"])


def images_to_patches(images: Sequence[RawImage], cfg: ModelConfig, dtype) -> Tensor:
    arrs = []
    for im in images:
        if im.width != cfg.tile_size or im.height != cfg.tile_size:
            raise ShapeError(f"media image {im.width}x{im.height} is not a {cfg.tile_size}^2 tile")
        arrs.append(patchify(im, cfg.patch).data)
    return Tensor(np.stack(arrs).astype(dtype))


def visual_tokens(patches: Tensor, params: Params, cfg: ModelConfig) -> Tensor:
    """All tiles' projected visual tokens, flattened to ``[N·tokens_per_tile, d_model]``."""
    fmap = encode_tile(patches, params, cfg)
    shuffled = pixel_shuffle(fmap, cfg.shuffle_r)
    proj = project(shuffled, params, cfg)
    N, t, d = proj.shape
    return ops.reshape(proj, (N * t, d))


def lm_forward(ids: np.ndarray, params: Params, cfg: ModelConfig,
               visual: Tensor | None = None, positions: np.ndarray | None = None) -> Tensor:
    """Logits ``[B, T, V]`` for token ids ``[B, T]``; ``positions`` index the flattened B·T rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ShapeError(f"ids must be [B, T], got {ids.shape}")
    B, T = ids.shape
    if T > cfg.context_limit:
        raise ValueError(f"sequence of {T} tokens exceeds context limit {cfg.context_limit}")
    x = ops.embedding(params["lm.embed"], ids)
    n_slots = 0 if positions is None else len(positions)
    n_vis = 0 if visual is None else visual.shape[0]
    if n_slots != n_vis:
        raise ShapeError(f"{n_slots} image placeholders but {n_vis} visual tokens")
    if n_vis:
        x = ops.scatter_rows(x, visual, positions)
    cos, sin = rope_angles(np.arange(T), cfg.head_dim, cfg.rope_base)
    rope = (cos.astype(x.dtype), sin.astype(x.dtype))
    for i in range(cfg.n_layers_lm):
        x = block(x, params, f"lm.{i}", cfg.n_heads, causal=True, rope=rope)
    x = ops.layer_norm(x, params["lm.lnf_g"], params["lm.lnf_b"])
    return ops.matmul(x, params["lm.head"])


def _check_runs(seq: MultimodalSequence, cfg: ModelConfig) -> None:
    for n in seq.tokens_per_image:
        if n != cfg.tokens_per_tile:
            raise ShapeError(f"placeholder run of {n} tokens but the model emits {cfg.tokens_per_tile} per tile")


def forward(seq: MultimodalSequence, params: Params, cfg: ModelConfig) -> Tensor:
    """Logits ``[T, vocab_size]`` for one rendered sequence."""
    _check_runs(seq, cfg)
    dtype = params["lm.embed"].dtype
    visual = None
    if seq.images:
        visual = visual_tokens(images_to_patches(seq.images, cfg, dtype), params, cfg)
    logits = lm_forward(seq.token_ids[None, :], params, cfg, visual, seq.placeholder_positions)
    return ops.reshape(logits, logits.shape[1:])


# ---------------------------------------------------------------------------
# training


@dataclass
class Batch:
    ids: np.ndarray  # [B, T]
    targets: np.ndarray  # [B, T]
    mask: np.ndarray  # [B, T]
    positions: np.ndarray  # flattened placeholder rows
    patches: Tensor | None
    n_tokens: int


def collate(seqs: Sequence[MultimodalSequence], vocab: Vocab, cfg: ModelConfig, dtype=np.float32) -> Batch:
    """Right-pad, shift targets by one and gather all media in placeholder order."""
    T = max(len(s) for s in seqs)
    if T > cfg.context_limit:
        raise ValueError(f"sequence of {T} tokens exceeds context limit {cfg.context_limit}")
    B = len(seqs)
    pad = vocab[PAD]
    ids = np.full((B, T), pad, dtype=np.int64)
    targets = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    positions, images = [], []
    for b, s in enumerate(seqs):
        _check_runs(s, cfg)
        tok, lm = s.token_ids, s.loss_mask
        n = len(tok)
        ids[b, :n] = tok
        targets[b, : n - 1] = tok[1:]
        mask[b, : n - 1] = lm[1:]
        positions.extend(b * T + s.placeholder_positions)
        images.extend(s.images)
    patches = images_to_patches(images, cfg, dtype) if images else None
    return Batch(ids, targets, mask, np.asarray(positions, dtype=np.int64), patches, int(mask.sum()))


def batch_loss(batch: Batch, params: Params, cfg: ModelConfig) -> Tensor:
    visual = visual_tokens(batch.patches, params, cfg) if batch.patches is not None else None
    logits = lm_forward(batch.ids, params, cfg, visual, batch.positions)
    return ops.cross_entropy_masked(logits, batch.targets, batch.mask)


class Adam:
    def __init__(self, params: Params, beta1: float = 0.9, beta2: float = 0.95, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, params: Params, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, p in params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if lr:
                p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def train_step(batch: Batch, params: Params, opt: Adam, lr: float, cfg: ModelConfig) -> float:
    """One masked-loss Adam step; returns the loss before the update."""
    for p in params.values():
        p.grad = None
    loss = batch_loss(batch, params, cfg)
    loss.backward()
    opt.step(params, lr)
    return float(loss.data)


# ---------------------------------------------------------------------------
# decoding


@dataclass
class Generation:
    ids: list[int]
    finished: bool  # stopped on end-of-utterance
    truncated: bool  # hit the context limit


def generate(prefix: MultimodalSequence, params: Params, cfg: ModelConfig, vocab: Vocab,
             max_new: int) -> Generation:
    """Greedy decoding until end-of-utterance, ``max_new`` tokens or the context limit."""
    if len(prefix) > cfg.context_limit:
        raise ValueError(f"prefix of {len(prefix)} tokens exceeds context limit {cfg.context_limit}")
    _check_runs(prefix, cfg)
    eou = vocab[EOU]
    out: list[int] = []
    ids = list(prefix.token_ids)
    positions = prefix.placeholder_positions
    with no_grad():
        visual = None
        if prefix.images:
            dtype = params["lm.embed"].dtype
            visual = visual_tokens(images_to_patches(prefix.images, cfg, dtype), params, cfg)
        for _ in range(max_new):
            if len(ids) >= cfg.context_limit:
                return Generation(out, False, True)
            logits = lm_forward(np.asarray(ids)[None, :], params, cfg, visual, positions)
            nxt = int(np.argmax(logits.data[0, -1]))
            if nxt == eou:
                return Generation(out, True, False)
            out.append(nxt)
            ids.append(nxt)
    return Generation(out, False, False)


# ---------------------------------------------------------------------------
# checkpoints: one SMT1 file per tensor plus config.txt


def save_checkpoint(path: str | Path, params: Params, cfg: ModelConfig, vocab: Vocab | None = None) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    for name, t in params.items():
        save_tensor(t, d / f"{name}.smt")
    write_kv(d / "config.txt", cfg.to_kv())
    if vocab is not None:
        (d / "vocab.json").write_text(vocab.to_json())


def load_checkpoint(path: str | Path, dtype=np.float32) -> tuple[Params, ModelConfig, Vocab | None]:
    d = Path(path)
    cfg = ModelConfig.from_kv(read_kv(d / "config.txt"))
    params = {}
    for name, shape in param_shapes(cfg).items():
        t = load_tensor(d / f"{name}.smt", dtype=dtype)
        if t.shape != shape:
            raise ShapeError(f"{name}: checkpoint shape {t.shape} != expected {shape}")
        t.requires_grad = True
        t.name = name
        params[name] = t
    vocab = Vocab.from_json((d / "vocab.json").read_text()) if (d / "vocab.json").exists() else None
    return params, cfg, vocab
