"""Command line entry point: ``smolpipe <command>``.

Exit codes: 0 success, 2 input error, 3 geometry/config error, 4 context overflow.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import subprocess
import sys
from contextlib import nullcontext
from pathlib import Path

from .kvfile import KVFormatError, read_kv, write_kv

EXIT_INPUT = 2
EXIT_GEOMETRY = 3
EXIT_CONTEXT = 4

log = logging.getLogger("smolpipe")


class CommandError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_run_manifest(out: Path, command: str, config: str | None, seed: int | None, inputs: list[str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_kv(out / "run_manifest.txt", {
        "command": command,
        "config": config or "",
        "seed": "" if seed is None else seed,
        "inputs": ";".join(inputs),
        "output_dir": str(out),
        "build": _git_describe(),
    })


def _pipeline_config(spec: str):
    from .budget import PRESET_NAMES, GeometryError, PipelineConfig

    if spec in PRESET_NAMES:
        return PipelineConfig.preset(spec)
    if not Path(spec).is_file():
        raise CommandError(EXIT_INPUT, f"config {spec!r} is neither a preset ({', '.join(PRESET_NAMES)}) nor a file")
    try:
        return PipelineConfig.from_file(spec)
    except KVFormatError as exc:
        raise CommandError(EXIT_INPUT, f"malformed config: {exc}") from None
    except GeometryError as exc:
        raise CommandError(EXIT_GEOMETRY, f"{spec}: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_tokenize_image(args) -> int:
    from .budget import image_token_count
    from .prompt import GridOverflowError, PositionMode, default_vocab, render_image_block
    from .vision import read_ppm, split_into_tiles

    out = Path(args.out)
    write_run_manifest(out, "tokenize-image", args.config, None, [args.image])
    cfg = _pipeline_config(args.config)
    try:
        img = read_ppm(args.image)
    except (OSError, ValueError) as exc:
        raise CommandError(EXIT_INPUT, f"cannot read image: {exc}") from None
    mode = PositionMode(args.mode)
    vocab = default_vocab(max_rows=args.max_grid, max_cols=args.max_grid)
    grid = split_into_tiles(img, cfg.tile_size, cfg.longest_edge_cap)
    try:
        block = render_image_block(grid, mode, vocab, cfg.tokens_per_tile)
    except GridOverflowError as exc:
        raise CommandError(EXIT_GEOMETRY, str(exc)) from None
    expected = image_token_count(cfg, img.width, img.height, mode, vocab)
    assert expected.total == len(block.ids), "renderer and budget formula disagree"

    print(f"grid={grid.rows}x{grid.cols} tiles={len(grid.tiles)} global=1 "
          f"visual_tokens={len(block.placeholders)}")
    for t in grid.tiles:
        print(f"tile row={t.row + 1} col={t.col + 1} tokens={cfg.tokens_per_tile}")
    print(f"global tokens={cfg.tokens_per_tile}")
    print(f"total_tokens={len(block.ids)} mode={mode.value}")
    with open(out / "tokens.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["index", "token_id", "token"])
        for i, tid in enumerate(block.ids):
            w.writerow([i, tid, vocab.tokens[tid]])
    return 0


def cmd_budget(args) -> int:
    from .budget import Workload, compare_configs, reports_to_csv
    from .prompt import PositionMode

    out = Path(args.out)
    write_run_manifest(out, "budget", ",".join(args.configs), None, [args.workload] if args.workload else [])
    configs = [_pipeline_config(c) for c in args.configs]
    if args.workload:
        try:
            workload = Workload.from_file(args.workload)
        except KVFormatError as exc:
            raise CommandError(EXIT_INPUT, f"malformed workload: {exc}") from None
        except OSError as exc:
            raise CommandError(EXIT_INPUT, f"cannot read workload: {exc}") from None
    else:
        workload = Workload()
    text = reports_to_csv(compare_configs(configs, workload, PositionMode(args.mode)))
    (out / "budget.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_make_data(args) -> int:
    from .synthetic import captioning_heldout, captioning_set, direction_set, glyph_grid_set, write_dataset

    out = Path(args.out)
    write_run_manifest(out, "make-data", None, args.seed, [])
    if args.task == "captioning":
        examples = captioning_set() if args.n is None else captioning_heldout(args.n, args.seed)
    elif args.task == "direction":
        examples = direction_set(args.n or 64, args.seed)
    else:
        examples = glyph_grid_set(args.n or 128, args.seed)
    write_dataset(out, examples, args.task, args.seed)
    print(f"wrote {len(examples)} samples to {out}")
    return 0


def cmd_train_toy(args) -> int:
    import numpy as np

    from .experiments import TrainSettings, caption_config, toy_vocab, train_model
    from .model import ModelConfig, batch_loss, collate, init_params, save_checkpoint
    from .prompt import ChatConfig, Turn, build_chat
    from .synthetic import load_dataset
    from .tensor import no_grad

    out = Path(args.out)
    write_run_manifest(out, "train-toy", args.config, args.seed, [args.dataset])
    vocab = toy_vocab()
    if args.config:
        try:
            cfg = ModelConfig.from_kv({**read_kv(args.config), "vocab_size": str(len(vocab))})
        except (KVFormatError, ValueError) as exc:
            raise CommandError(EXIT_GEOMETRY, f"bad model config: {exc}") from None
    else:
        cfg = caption_config(vocab)
    try:
        _, samples = load_dataset(args.dataset, cfg.tile_size, frames_per_video=args.frames)
    except (OSError, ValueError, KeyError) as exc:
        raise CommandError(EXIT_INPUT, f"cannot load dataset: {exc}") from None
    chat_cfg = ChatConfig(tokens_per_tile=cfg.tokens_per_tile)
    seqs, too_long = [], []
    for s in samples:
        seq = build_chat(s.system, [Turn("user", [*s.media, s.question]), Turn("assistant", s.answer)], vocab, chat_cfg)
        if len(seq) > cfg.context_limit:
            too_long.append(f"{s.id} ({len(seq)} tokens)")
        seqs.append(seq)
    if too_long:
        raise CommandError(EXIT_CONTEXT, "samples exceed the context limit: " + ", ".join(too_long))

    settings = TrainSettings(steps=args.steps, seed=args.seed, lr=args.lr, batch_size=args.batch_size,
                             stop_loss=args.stop_loss)
    params = init_params(cfg, seed=args.seed)
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["step", "loss", "lr", "tokens"])
        params, _ = train_model(seqs, vocab, cfg, settings, params=params,
                                on_step=lambda r: w.writerow([r.step, f"{r.loss:.8g}", f"{r.lr:.8g}", r.tokens]))
    with no_grad():
        final = float(batch_loss(collate(seqs, vocab, cfg, np.float32), params, cfg).data)
    save_checkpoint(out / "checkpoint", params, cfg, vocab)
    print(f"final_loss={final:.6f}")
    return 0


def cmd_ablate(args) -> int:
    from .experiments import ABLATIONS

    out = Path(args.out)
    write_run_manifest(out, "ablate", None, args.seed, [f"axis={args.axis}"])
    kwargs = {"seed": args.seed}
    if args.steps is not None:
        kwargs["steps"] = args.steps
    rows = ABLATIONS[args.axis](**kwargs)
    path = out / f"ablate_{args.axis}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["axis", "setting", "metric", "seq_len", "final_loss"])
        for r in rows:
            w.writerow([r.axis, r.setting, f"{r.metric:.6f}", f"{r.seq_len:.2f}", f"{r.final_loss:.6g}"])
    sys.stdout.write(path.read_text())
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smolpipe", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("tokenize-image", help="tile a PPM image and render its token layout")
    t.add_argument("image")
    t.add_argument("--config", default="smolvlm-256m", help="preset name or key=value config file")
    t.add_argument("--mode", choices=["learned", "string"], default="learned")
    t.add_argument("--max-grid", type=int, default=8, help="positional tokens per axis in the vocabulary")
    t.add_argument("--out", default="out/tokenize")
    t.set_defaults(func=cmd_tokenize_image)

    b = sub.add_parser("budget", help="token / memory table for one or more configs")
    b.add_argument("configs", nargs="+", help="preset names or config files")
    b.add_argument("--workload", help="key=value workload file")
    b.add_argument("--mode", choices=["learned", "string"], default="learned")
    b.add_argument("--out", default="out/budget")
    b.set_defaults(func=cmd_budget)

    m = sub.add_parser("make-data", help="write a synthetic dataset directory")
    m.add_argument("--task", choices=["captioning", "direction", "grid"], default="captioning")
    m.add_argument("--n", type=int)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", default="out/data")
    m.set_defaults(func=cmd_make_data)

    tr = sub.add_parser("train-toy", help="train the toy VLM on a dataset directory")
    tr.add_argument("dataset")
    tr.add_argument("--config", help="model config key=value file")
    tr.add_argument("--steps", type=int, default=2000)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--lr", type=float, default=3e-3)
    tr.add_argument("--batch-size", type=int, default=32)
    tr.add_argument("--stop-loss", type=float, default=None)
    tr.add_argument("--frames", type=int, default=8, help="frames sampled per video")
    tr.add_argument("--out", default="out/train")
    tr.set_defaults(func=cmd_train_toy)

    a = sub.add_parser("ablate", help="train/evaluate the toy model across one design axis")
    a.add_argument("--axis", choices=["shuffle", "frames", "posmode", "ropebase"], required=True)
    a.add_argument("--steps", type=int)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", default="out/ablate")
    a.set_defaults(func=cmd_ablate)
    return p


def _thread_limit():
    n = os.environ.get("SMOLPIPE_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
