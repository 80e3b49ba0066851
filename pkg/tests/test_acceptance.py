"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary and printed
for ``-s`` runs) and then asserts, so a failing criterion stays visible as a failure.
"""

import itertools
import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from oracles import OP_CASES, gradcheck, micro_model_gradcheck, shuffle_oracle
from smolpipe.budget import (
    PRESET_NAMES,
    MixtureSpec,
    PipelineConfig,
    Workload,
    compare_configs,
    image_token_count,
    kv_cache_bytes,
    plan_mixture,
)
from smolpipe.compress import VisualFeatureMap, pixel_shuffle, pixel_unshuffle
from smolpipe.experiments import ablate_frames, ablate_posmode, caption_config, example_chat, overfit_captioning, toy_vocab
from smolpipe.model import apply_rope, batch_loss, collate, init_params, param_counts
from smolpipe.synthetic import captioning_set
from smolpipe.tensor import Tensor, no_grad
from smolpipe.vision import (
    RawImage,
    grid_shape,
    longest_edge_size,
    patchify,
    reassemble_tiles,
    resize_bilinear,
    resize_longest_edge,
    split_into_tiles,
    tile_count,
)


class Verdict:
    def __init__(self, log: list[str], number: int, title: str):
        self.log, self.number, self.title = log, number, title
        self.failures: list[str] = []
        self.notes: list[str] = []
        self.t0 = time.perf_counter()

    def check(self, ok: bool, what: str) -> None:
        if not ok:
            self.failures.append(what)

    def note(self, text: str) -> None:
        self.notes.append(text)

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.t0

    def finish(self) -> None:
        status = "FAIL" if self.failures else "PASS"
        detail = "; ".join(self.notes + [f"failed: {f}" for f in self.failures])
        line = f"criterion {self.number} {status} {self.title} [{self.elapsed:.1f}s] {detail}".rstrip()
        self.log.append(line)
        print(line)
        assert not self.failures, line


# --- 1 ----------------------------------------------------------------------------------


def test_criterion_01_pixel_shuffle_exactness(acceptance_log):
    v = Verdict(acceptance_log, 1, "pixel shuffle exactness")
    rng = np.random.default_rng(0)
    cases = 0
    for r in (1, 2, 4):
        for h, w in itertools.product(range(r, 17, r), repeat=2):
            for c in range(1, 9):
                x = rng.standard_normal((h, w, c))
                y = pixel_shuffle(VisualFeatureMap(Tensor(x, dtype=np.float64)), r)
                v.check(y.n_tokens == h * w // (r * r), f"count {h}x{w}x{c} r={r}")
                v.check(np.array_equal(y.data.data, shuffle_oracle(x, r)), f"index map {h}x{w}x{c} r={r}")
                back = pixel_unshuffle(y, r).data.data
                v.check(back.tobytes() == x.tobytes(), f"round trip {h}x{w}x{c} r={r}")
                cases += 1
    v.check(v.elapsed < 5, f"runtime {v.elapsed:.2f}s >= 5s")
    v.note(f"{cases} shapes")
    v.finish()


# --- 2 ----------------------------------------------------------------------------------


def test_criterion_02_token_arithmetic(acceptance_log):
    v = Verdict(acceptance_log, 2, "token arithmetic")
    base = dict(name="t", encoder_params=93_000_000, lm_params=135_000_000, tile_size=512, patch=16)
    pre = patchify(RawImage.solid(512, 512), 16).shape[0]
    v.check(pre == 1024, f"512^2 patch 16 gave {pre} patches")
    r1 = image_token_count(PipelineConfig(**base, shuffle_r=1), 512, 512).visual_tokens
    v.check(r1 == 1024, f"r=1 gave {r1}")
    r4 = image_token_count(PipelineConfig(**base, shuffle_r=4), 512, 512).visual_tokens
    v.check(r4 == 64, f"r=4 gave {r4}")
    big = image_token_count(PipelineConfig(**base, shuffle_r=4, longest_edge_cap=1920), 1920, 960)
    v.check(big.subimages == 9, f"1920x960 gave {big.subimages} sub-images")
    v.check(big.visual_tokens == 576, f"1920x960 gave {big.visual_tokens} visual tokens")
    v.note(f"{pre} -> {r4}; 1920x960 -> {big.subimages} sub-images, {big.visual_tokens} tokens")
    v.finish()


# --- 3 ----------------------------------------------------------------------------------


def test_criterion_03_gradient_suite(acceptance_log):
    v = Verdict(acceptance_log, 3, "gradient suite")
    rng = np.random.default_rng(3)
    worst_op, worst = "", 0.0
    for name, (build, shapes) in OP_CASES.items():
        err = gradcheck(build, [rng.standard_normal(s) for s in shapes])
        v.check(err < 1e-4, f"{name} rel err {err:.2e}")
        if err > worst:
            worst_op, worst = name, err
    model_err = micro_model_gradcheck()
    v.check(model_err < 1e-4, f"micro model rel err {model_err:.2e}")
    v.check(v.elapsed < 60, f"runtime {v.elapsed:.1f}s >= 60s")
    v.note(f"{len(OP_CASES)} ops, worst {worst_op} {worst:.1e}; micro model {model_err:.1e}")
    v.finish()


# --- 4 ----------------------------------------------------------------------------------


def test_criterion_04_rope_relative_position(acceptance_log):
    v = Verdict(acceptance_log, 4, "rope relative position")
    limit = 16384
    for base in (10_000.0, 273_000.0):
        rng = np.random.default_rng(int(base))
        hd = 64
        q, k = Tensor(rng.standard_normal((1, hd))), Tensor(rng.standard_normal((1, hd)))

        def score(m, n):
            return float(apply_rope(q, k, [m], base)[0].data[0] @ apply_rope(q, k, [n], base)[1].data[0])

        worst = 0.0
        for _ in range(1000):
            m, n = (int(x) for x in rng.integers(0, limit // 2, size=2))
            s = int(rng.integers(0, limit - max(m, n)))
            worst = max(worst, abs(score(m, n) - score(m + s, n + s)))
        v.check(worst < 1e-9, f"base {base:.0f} shift error {worst:.1e}")

        # every position up to the limit: finite, norm-preserving, pairwise distinct
        pos = np.arange(limit)
        qs = Tensor(np.repeat(q.data, limit, axis=0))
        enc = apply_rope(qs, qs, pos, base, context_limit=limit)[0].data
        v.check(bool(np.isfinite(enc).all()), f"base {base:.0f} non-finite encoding")
        v.check(np.allclose(np.linalg.norm(enc, axis=1), np.linalg.norm(q.data)), f"base {base:.0f} norm drift")
        v.check(len(np.unique(np.round(enc, 9), axis=0)) == limit, f"base {base:.0f} repeated encodings")
        v.note(f"base {base:.0f} worst {worst:.1e}")
    v.finish()


# --- 5 ----------------------------------------------------------------------------------


def test_criterion_05_masking(acceptance_log):
    v = Verdict(acceptance_log, 5, "masking")
    vocab = toy_vocab()
    cfg = caption_config(vocab)
    params = {k: Tensor(t.data.astype(np.float64)) for k, t in init_params(cfg, seed=0).items()}
    seqs = [example_chat(ex, vocab, cfg) for ex in captioning_set()[:4]]
    batch = collate(seqs, vocab, cfg, np.float64)
    with no_grad():
        base = batch_loss(batch, params, cfg).data.copy()
        rng = np.random.default_rng(0)
        for trial in range(5):
            flipped = np.where(batch.mask, batch.targets, rng.integers(0, cfg.vocab_size, batch.targets.shape))
            saved, batch.targets = batch.targets, flipped
            v.check(batch_loss(batch, params, cfg).data.tobytes() == base.tobytes(), f"target flip {trial}")
            batch.targets = saved

        user_pos = [s.start for s in seqs[0].segments if s.role == "user" and s.kind == "text"][0]
        saved = batch.ids.copy()
        batch.ids[0, user_pos] = (batch.ids[0, user_pos] + 1) % cfg.vocab_size
        v.check(batch_loss(batch, params, cfg).data != base, "user input edit left the loss unchanged")
        batch.ids = saved

    eou, open_assistant = vocab["<end_of_utterance>"], vocab["<|assistant|>"]
    for seq in seqs:
        want = np.zeros(len(seq), dtype=bool)
        for s in seq.segments:
            if s.role == "assistant" and not (s.kind == "marker" and seq.token_ids[s.start] == open_assistant):
                want[s.start:s.end] = True
        v.check(np.array_equal(seq.loss_mask, want), "mask differs from assistant span")
        v.check(seq.token_ids[seq.loss_mask][-1] == eou, "mask does not end on end-of-utterance")
    v.note(f"{int(batch.mask.sum())} supervised of {batch.mask.size} positions")
    v.finish()


# --- 6 ----------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_06_overfit(acceptance_log):
    v = Verdict(acceptance_log, 6, "overfit captioning")
    with threadpool_limits(1):
        res = overfit_captioning(steps=2000, seed=0)
    n_params = param_counts(res.params)["total"]
    v.check(n_params <= 1_000_000, f"{n_params} params")
    v.check(res.final_loss < 0.05, f"final loss {res.final_loss:.4f}")
    v.check(res.steps <= 2000, f"{res.steps} steps")
    v.check(res.correct >= 30, f"{res.correct}/{res.total} captions")
    v.check(v.elapsed < 300, f"runtime {v.elapsed:.0f}s")
    v.note(f"{n_params} params, loss {res.final_loss:.4f} after {res.steps} steps, {res.correct}/{res.total} exact")
    v.finish()


# --- 7 ----------------------------------------------------------------------------------


def test_criterion_07_tiling_geometry(acceptance_log):
    v = Verdict(acceptance_log, 7, "tiling geometry")
    rng = np.random.default_rng(2024)
    tiled = 0
    for _ in range(200):
        tile = int(rng.choice([8, 16, 32]))
        w, h = (int(x) for x in rng.integers(1, 9 * tile, size=2))
        cap = int(rng.integers(tile, 8 * tile + 1)) if rng.random() < 0.5 else None
        img = RawImage(rng.integers(0, 256, (h, w, 3), dtype=np.uint8))
        g = split_into_tiles(img, tile, cap)
        src = resize_longest_edge(img, cap) if cap else img
        wp, hp = longest_edge_size(w, h, cap) if cap else (w, h)
        rows, cols = min(8, max(1, math.ceil(hp / tile))), min(8, max(1, math.ceil(wp / tile)))
        expect = 0 if rows == cols == 1 else rows * cols
        v.check((g.rows, g.cols) == grid_shape(wp, hp, tile) == (rows, cols), f"grid for {w}x{h}")
        v.check(len(g.tiles) == tile_count(w, h, tile, cap) == expect, f"tile count for {w}x{h}")
        if g.tiles:
            tiled += 1
            want = resize_bilinear(src, cols * tile, rows * tile).data
            v.check(np.array_equal(reassemble_tiles(g).data, want), f"reassembly for {w}x{h}")
        v.check(np.array_equal(g.global_image.data, resize_bilinear(src, tile, tile).data), f"global for {w}x{h}")
    v.note(f"200 sizes, {tiled} multi-tile")
    v.finish()


# --- 8 ----------------------------------------------------------------------------------


def test_criterion_08_mixture_planner(acceptance_log):
    v = Verdict(acceptance_log, 8, "mixture planner")
    spec = MixtureSpec({"text": 0.14, "video": 0.33, "image": 0.53}, seed=7)
    plan = plan_mixture(spec, 10_000)
    real = plan.realized()
    for k in ("text", "video"):
        v.check(abs(real[k] - spec.fractions[k]) <= 0.005, f"{k} realized {real[k]:.4f}")
    again = plan_mixture(MixtureSpec(dict(spec.fractions), seed=7), 10_000)
    v.check(again.sequence == plan.sequence, "same seed gave a different schedule")
    cot = plan_mixture(MixtureSpec({"cot": 0.0005, "rest": 0.9995}, seed=7), 10_000)
    v.check(cot.counts["cot"] == 5 and cot.sequence.count("cot") == 5, f"cot count {cot.sequence.count('cot')}")
    v.note(f"text {real['text']:.4f}, video {real['video']:.4f}, cot {cot.sequence.count('cot')}")
    v.finish()


# --- 9 ----------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_09_directional_ablations(acceptance_log):
    v = Verdict(acceptance_log, 9, "directional ablations")
    with threadpool_limits(1):
        t = time.perf_counter()
        frames = {row.setting: row for row in ablate_frames(factors=(1, 8))}
        t_frames = time.perf_counter() - t
        t = time.perf_counter()
        pos = {row.setting: row for row in ablate_posmode()}
        t_pos = time.perf_counter() - t
    k1, k8 = frames["k=1"].metric, frames["k=8"].metric
    v.check(k8 <= k1, f"k=8 accuracy {k8:.3f} above k=1 {k1:.3f}")
    learned, string = pos["learned"], pos["string"]
    v.check(learned.seq_len < string.seq_len, f"learned length {learned.seq_len:.1f} not shorter")
    v.check(learned.metric >= string.metric,
            f"learned cell accuracy {learned.metric:.4f} below string {string.metric:.4f}")
    v.check(t_frames < 600 and t_pos < 600, f"runtimes {t_frames:.0f}s / {t_pos:.0f}s")
    v.note(f"frames k=1 {k1:.3f} k=8 {k8:.3f} ({t_frames:.0f}s)")
    v.note(f"positions learned {learned.metric:.4f}/{learned.seq_len:.1f} tok, "
           f"string {string.metric:.4f}/{string.seq_len:.1f} tok ({t_pos:.0f}s)")
    v.finish()


# --- 10 ---------------------------------------------------------------------------------


def test_criterion_10_budget_consistency(acceptance_log):
    v = Verdict(acceptance_log, 10, "budget consistency")
    presets = [PipelineConfig.preset(n) for n in PRESET_NAMES]
    for cfg in presets:
        unit = kv_cache_bytes(cfg, 1, 1, 2)
        for seq, batch in itertools.product((0, 1, 7, 1024, 16384), (1, 2, 3, 64)):
            v.check(kv_cache_bytes(cfg, seq, batch, 2) == unit * seq * batch, f"{cfg.name} kv({seq},{batch})")
    rows = compare_configs(presets, Workload())
    by_name = {r.config: r.ram_bytes for r in rows}
    order = sorted(by_name, key=by_name.get)
    v.check(order == ["smolvlm-256m", "smolvlm-500m", "smolvlm-2.2b"], f"RAM order {order}")
    v.note(", ".join(f"{n} {by_name[n] / 2**30:.2f} GiB" for n in order))
    v.finish()
