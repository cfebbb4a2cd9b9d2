"""Batch command-line interface.

Exit codes: 0 success, 1 validation error (bad flags, config or inputs),
2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_run_config, pairs_from_snapshot
from .corpus import list_images, load_images, synthetic_corpus
from .degradation import MANIFEST_FIELDS, DegradationSetting, degrade, manifest_row, sample_spec
from .imaging import ImageFormatError, read_image, write_image
from .srnet import BicubicModel, sr_forward
from .trainer.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .trainer.evaluation import GRIDS, evaluate, export_representations, parse_cell, write_report
from .trainer.training import Trainer, load_model_state, model_from_checkpoint, write_trace

log = logging.getLogger("cdcl")


class UsageError(Exception):
    """Bad command line; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def worker_count() -> int:
    raw = os.environ.get("CDCL_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"CDCL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"CDCL_THREADS must be a positive integer, got {raw!r}")
    return n


def image_seed(master: int, index: int) -> int:
    """Per-image seed derived from the master seed; recorded in the manifest."""
    return int(np.random.SeedSequence([master, index]).generate_state(1, np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# run directory helpers
# ---------------------------------------------------------------------------

def _prepare_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, argv: Sequence[str], files: List[str], **extra) -> None:
    data = {"command": command, "argv": list(argv), "version": __version__,
            "files": sorted(files), **extra}
    (out / "run.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _echo_config(out: Path, cfg: RunConfig) -> str:
    (out / "config.txt").write_text(cfg.dump())
    return "config.txt"


def _load_corpus(args) -> List[np.ndarray]:
    if args.data is not None:
        _, imgs = load_images(args.data)
        if not imgs:
            raise UsageError(f"no .ppm images in {args.data}")
        return imgs
    return synthetic_corpus(args.synthetic, args.synthetic_size, args.corpus_seed)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_degrade(args, argv) -> int:
    if args.setting == 0 and not args.widths:
        raise UsageError("--setting 0 needs --widths")
    setting = (DegradationSetting.fixed_widths(args.widths) if args.setting == 0
               else DegradationSetting.from_preset(args.setting))
    paths = list_images(args.inp)
    if not paths:
        raise UsageError(f"no .ppm images in {args.inp}")
    workers = worker_count()
    out = _prepare_out(args.out)

    def job(i_path):
        i, path = i_path
        seed = image_seed(args.seed, i)
        rng = np.random.default_rng(seed)
        hr = read_image(path)
        h, w = hr.shape[:2]
        hr = hr[:h - h % args.scale, :w - w % args.scale]
        spec = sample_spec(setting, args.scale, rng)
        lr = degrade(hr, spec, rng, args.downsampler)
        lr_path = out / f"{path.stem}_lr.ppm"
        write_image(lr, lr_path)
        return manifest_row(str(path), str(lr_path), spec, seed)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(job, enumerate(paths)))
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        w.writeheader()
        w.writerows(rows)
    (out / "config.txt").write_text(
        f"setting = {args.setting}\nwidths = {','.join(map(repr, args.widths))}\n"
        f"scale = {args.scale}\nseed = {args.seed}\ndownsampler = {args.downsampler}\n"
        f"seed_scheme = manifest seed = SeedSequence([seed, index]) state >> 1\n")
    _write_manifest(out, "degrade", argv, ["manifest.csv", "config.txt"]
                    + [Path(r["lr_path"]).name for r in rows], seed=args.seed)
    print(f"wrote {len(rows)} LR images to {out}")
    return 0


def _run_training(args, argv, stage: str) -> int:
    if args.steps is not None and args.steps < 1:
        raise UsageError("--steps must be positive")
    if args.resume and getattr(args, "pretrained", None):
        raise UsageError("--resume and --pretrained are mutually exclusive")
    source = args.resume or getattr(args, "pretrained", None)
    ckpt = load_checkpoint(source) if source else None
    base = pairs_from_snapshot(ckpt.config) if ckpt is not None else None
    cfg = load_run_config(args.config, args.set, base)
    corpus = _load_corpus(args)
    if args.resume:
        if ckpt.counters.get("stage") != stage:
            raise UsageError(f"--resume checkpoint is at stage {ckpt.counters.get('stage')!r}, not {stage!r}")
        trainer = Trainer.from_checkpoint(ckpt, corpus, cfg.train)
    else:
        trainer = Trainer(cfg.model, cfg.train, corpus)
        if ckpt is not None:
            load_model_state(trainer.model, ckpt)
        if stage == "joint":
            trainer.start_joint()
    out = _prepare_out(args.out)
    files = [_echo_config(out, cfg)]
    trace_rows = []

    def on_step(row):
        trace_rows.append(row)
        if args.save_every and trainer.step % args.save_every == 0:
            name = f"{stage}_step{trainer.step:06d}.cdck"
            save_checkpoint(out / name, trainer.checkpoint())
            files.append(name)

    trainer.run(args.steps, on_step)
    write_trace(out / "loss_trace.csv", trace_rows)
    final = f"{stage}.cdck"
    save_checkpoint(out / final, trainer.checkpoint())
    files += ["loss_trace.csv", final]
    _write_manifest(out, "pretrain" if stage == "pretrain" else "train", argv, files,
                    seed=cfg.train.seed, stage=stage, final_step=trainer.step,
                    corpus=str(args.data) if args.data else
                    {"synthetic": args.synthetic, "size": args.synthetic_size, "seed": args.corpus_seed})
    print(f"{stage}: {len(trace_rows)} steps, final total loss "
          f"{trace_rows[-1]['total'] if trace_rows else float('nan'):.5f}; wrote {out / final}")
    return 0


def cmd_pretrain(args, argv) -> int:
    return _run_training(args, argv, "pretrain")


def cmd_train(args, argv) -> int:
    if not args.pretrained and not args.resume:
        raise UsageError("train needs --pretrained (or --resume)")
    return _run_training(args, argv, "joint")


def _load_model(spec: str, scale: int):
    if spec == "bicubic":
        return BicubicModel(scale)
    return model_from_checkpoint(load_checkpoint(spec))


def cmd_infer(args, argv) -> int:
    model = model_from_checkpoint(load_checkpoint(args.model))
    lr = read_image(args.inp)
    sr = sr_forward(lr, model)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True)
    write_image(sr, out)
    print(f"wrote {sr.shape[1]}x{sr.shape[0]} image to {out}")
    return 0


def cmd_eval(args, argv) -> int:
    scale = args.scale or GRIDS[args.grid][0]
    model = _load_model(args.model, scale)
    if args.model != "bicubic" and not args.scale:
        scale = model.cfg.scale
    paths, images = load_images(args.bench)
    if not images:
        raise UsageError(f"no .ppm images in {args.bench}")
    rows = evaluate(model, images, args.grid, scale, args.seed, args.channel_mode)
    out = _prepare_out(args.out)
    write_report(out / "report.csv", rows)
    (out / "config.txt").write_text(
        f"model = {args.model}\nbench = {args.bench}\ngrid = {args.grid}\nscale = {scale}\n"
        f"seed = {args.seed}\nchannel_mode = {args.channel_mode}\n")
    _write_manifest(out, "eval", argv, ["report.csv", "config.txt"], seed=args.seed,
                    images=[str(p) for p in paths])
    for r in rows:
        print(f"{r['cell']:>12s}  PSNR {r['psnr']:.3f}  SSIM {r['ssim']:.4f}")
    return 0


def cmd_export(args, argv) -> int:
    model = model_from_checkpoint(load_checkpoint(args.model))
    specs = [parse_cell(c, model.cfg.scale) for c in args.cells]
    _, images = load_images(args.data)
    if not images:
        raise UsageError(f"no .ppm images in {args.data}")
    reps = export_representations(model.estimator, images, specs, args.patch, args.per_image, args.seed)
    out = _prepare_out(args.out)
    reps.write_csv(out / "representations.csv")
    summary = {"separation_ratio": reps.ratio if np.isfinite(reps.ratio) else "inf",
               "classes": [s.label() for s in specs], "n_samples": len(reps.labels)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    (out / "config.txt").write_text(
        f"model = {args.model}\ndata = {args.data}\ncells = {','.join(args.cells)}\n"
        f"patch = {args.patch}\nper_image = {args.per_image}\nseed = {args.seed}\n")
    _write_manifest(out, "export-reps", argv, ["representations.csv", "summary.json", "config.txt"],
                    seed=args.seed)
    print(f"separation ratio {reps.ratio:.4f} over {len(reps.labels)} samples")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _csv_floats(text: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_training_flags(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, repeatable (e.g. train.B=16)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="directory of HR .ppm training images")
    src.add_argument("--synthetic", type=int, help="use N procedural training images instead")
    p.add_argument("--synthetic-size", type=int, default=96, help="side of procedural images")
    p.add_argument("--corpus-seed", type=int, default=0, help="seed of the procedural corpus")
    p.add_argument("--steps", type=int, default=None, help="stop after this many steps (default: full stage)")
    p.add_argument("--save-every", type=int, default=0, help="also checkpoint every N steps (0: off)")
    p.add_argument("--resume", help="continue from a checkpoint of this stage")
    p.add_argument("--out", required=True, help="run directory")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="cdcl", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("degrade", help="synthesize an LR corpus from HR images", formatter_class=fmt)
    p.add_argument("--setting", type=int, choices=(0, 1, 2, 3), default=1,
                   help="degradation preset (0: fixed isotropic widths from --widths)")
    p.add_argument("--widths", type=_csv_floats, default=[], help="widths for --setting 0, e.g. 0.2,2.6")
    p.add_argument("--scale", type=int, choices=(2, 3, 4), default=4)
    p.add_argument("--in", dest="inp", required=True, help="directory of HR .ppm images")
    p.add_argument("--out", required=True, help="output directory for LR images and manifest")
    p.add_argument("--seed", type=int, default=0, help="master seed; per-image seeds are derived from (seed, i)")
    p.add_argument("--downsampler", choices=("bicubic", "decimate"), default="bicubic")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("pretrain", help="contrastive pretraining of the estimator", formatter_class=fmt)
    _add_training_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="joint L1 + contrastive training", formatter_class=fmt)
    _add_training_flags(p)
    p.add_argument("--pretrained", help="checkpoint written by pretrain")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve one image", formatter_class=fmt)
    p.add_argument("--model", required=True, help="checkpoint")
    p.add_argument("--in", dest="inp", required=True, help="LR .ppm image")
    p.add_argument("--out", required=True, help="output .ppm path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="benchmark over a degradation grid", formatter_class=fmt)
    p.add_argument("--model", required=True, help="checkpoint, or 'bicubic' for the baseline")
    p.add_argument("--bench", required=True, help="directory of HR .ppm images")
    p.add_argument("--grid", choices=sorted(GRIDS), default="setting1x4")
    p.add_argument("--scale", type=int, choices=(2, 3, 4), default=None,
                   help="override the grid's scale (default: checkpoint / grid scale)")
    p.add_argument("--seed", type=int, default=0, help="degradation seed")
    p.add_argument("--channel-mode", choices=("y", "rgb"), default="y")
    p.add_argument("--out", default="eval_out", help="run directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-reps", help="export degradation embeddings as CSV", formatter_class=fmt)
    p.add_argument("--model", required=True, help="checkpoint")
    p.add_argument("--data", required=True, help="directory of HR .ppm images")
    p.add_argument("--cells", type=lambda s: [t for t in s.split(",") if t], default=["b0.2", "b2.6"],
                   help="comma-separated degradation tags, e.g. b0.2,b2.6 or b2.0n20,j60")
    p.add_argument("--patch", type=int, default=64, help="HR crop size")
    p.add_argument("--per-image", type=int, default=4, help="crops per image")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args, argv)
    except (UsageError, ConfigError, FileNotFoundError, ImageFormatError, CheckpointError,
            KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        log.exception("runtime failure")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
