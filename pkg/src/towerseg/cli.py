"""Command line entry point, ``towerseg <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint, save_checkpoint
from .cloud_model import read_tile, write_tile
from .inference_pipeline import PipelineConfig, infer_scene, read_decisions
from .metrics import ConfusionCounts, f1_score
from .synthgen import SceneConfig, generate_corpus, read_corpus_index
from .training import (TrainConfig, assemble_classification_set, assemble_segmentation_set,
                       parse_key_values, train_model)
from .workflow import (ablation_csv, ablation_grid, load_block, load_split, make_report, point_counts,
                       prepare_corpus, run_ablation, window_truth)

log = logging.getLogger("towerseg")


class UsageError(Exception):
    """Bad flags or missing inputs; reported with exit code 2."""


def _threads(args, default: int) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("TOWERSEG_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"TOWERSEG_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise UsageError("TOWERSEG_THREADS must be positive")
        return n
    return default


def _need(path, what: str, is_dir: bool = False) -> Path:
    p = Path(path)
    if not (p.is_dir() if is_dir else p.is_file()):
        raise UsageError(f"{what} not found: {p}")
    return p


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    try:
        cfg = SceneConfig(extent=(args.extent, args.extent), point_density=args.density,
                          tower_count=args.towers, color_signal=not args.no_color_signal)
        # splits and tower allocation are checked before any scene is written
        index = generate_corpus(cfg, args.scenes, args.seed, args.out, prevalence=args.prevalence,
                                test_fraction=args.test_fraction, val_fraction=args.val_fraction,
                                threads=_threads(args, os.cpu_count() or 1))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = read_corpus_index(index)
    towers = sum(r["towers"] for r in rows)
    print(f"wrote {len(rows)} blocks ({towers} towers) to {args.out}")
    return 0


def cmd_prep(args) -> int:
    corpus = _need(args.corpus, "corpus directory", is_dir=True)
    sizes = prepare_corpus(corpus, args.out, threads=_threads(args, os.cpu_count() or 1),
                           window_side=args.window_side, split_side=args.split_side,
                           min_tower_points=args.min_tower_points, max_height=args.max_height)
    print(" ".join(f"{k}={v}" for k, v in sizes.items()))
    return 0


TRAIN_FLAGS = {"epochs": "epochs", "batch_size": "batch_size", "n_points": "n_points", "lr": "initial_lr",
               "beta": "beta", "sampler": "sampler_mode", "variant": "variant", "seed": "seed",
               "plateau_patience": "plateau_patience", "early_stop_patience": "early_stop_patience",
               "background_fraction": "background_keep_fraction_seg"}


def _train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        try:
            values.update(parse_key_values(_need(args.config, "config file").read_text()))
        except ValueError as exc:
            raise UsageError(f"{args.config}: {exc}") from None
    for flag, key in TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    if args.no_color:
        values["use_color_nir"] = False
    try:
        return TrainConfig.from_mapping(values)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _test_blocks(windows_dir) -> set:
    test = Path(windows_dir) / "test" / "index.csv"
    if not test.exists():
        return set()
    with open(test, newline="") as fh:
        return {r["source_block_id"] for r in csv.DictReader(fh)}


def _cmd_train(args, task: str) -> int:
    cfg = _train_config(args)
    wdir = _need(args.windows, "windows directory", is_dir=True)
    for split in ("train", "val"):
        _need(wdir / split / "index.csv", f"{split} window index")
    train, val = load_split(wdir, "train"), load_split(wdir, "val")
    assemble = assemble_classification_set if task == "cls" else assemble_segmentation_set
    train_set = assemble(train, cfg)
    val_set = assemble(val, cfg, augment=False)
    log.info("%s: %d training / %d validation samples", task, len(train_set), len(val_set))
    ckpt, hist = train_model(train_set, val_set, task, cfg, test_blocks=_test_blocks(wdir))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / f"{task}.ckpt")
    (out / f"{task}_history.csv").write_text(hist.to_csv())
    print(f"{task}: {len(hist)} epochs, best epoch {hist.best_epoch} "
          f"val {min(hist.val_loss):.5f} -> {out / f'{task}.ckpt'}")
    return 0


def cmd_train_cls(args) -> int:
    return _cmd_train(args, "cls")


def cmd_train_seg(args) -> int:
    return _cmd_train(args, "seg")


def cmd_infer(args) -> int:
    corpus = _need(args.corpus, "corpus directory", is_dir=True)
    cls_ckpt = load_checkpoint(_need(args.cls, "classifier checkpoint"))
    seg_ckpt = load_checkpoint(_need(args.seg, "segmenter checkpoint"))
    rows = [r for r in read_corpus_index(corpus) if args.split == "all" or r["split"] == args.split]
    if args.blocks:
        wanted = set(args.blocks.split(","))
        rows = [r for r in rows if r["block_id"] in wanted]
    if not rows:
        raise UsageError(f"no blocks selected from {corpus}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = _threads(args, os.cpu_count() or 1)
    for row in rows:
        bid = row["block_id"]
        cloud, ground = load_block(corpus, bid)
        cfg = PipelineConfig(cls_ckpt, seg_ckpt, args.window_side, args.stride, args.threshold,
                             args.n_points_cls, threads=threads, seed=args.seed, block_id=bid)
        result = infer_scene(cloud, ground, cfg)
        write_tile(result.cloud, out / f"{bid}.pct")
        (out / f"{bid}.decisions.csv").write_text(result.decisions_csv())
        n_pos = sum(d.decision for d in result.decisions)
        print(f"{bid}: {len(result.decisions)} windows, {n_pos} segmented")
    return 0


def _pairs(pred: Path, truth: Path):
    if pred.is_dir():
        if not truth.is_dir():
            raise UsageError("--pred is a directory, so --truth must be one too")
        files = sorted(pred.glob("*.pct"))
        if not files:
            raise UsageError(f"no .pct tiles in {pred}")
        for p in files:
            yield p, _need(truth / p.name, "truth tile"), pred / f"{p.stem}.decisions.csv"
    else:
        yield _need(pred, "prediction tile"), _need(truth, "truth tile"), None


def cmd_eval(args) -> int:
    pred, truth = Path(args.pred), Path(args.truth)
    if not pred.exists():
        raise UsageError(f"prediction path not found: {pred}")
    total = ConfusionCounts(*(np.zeros(2, dtype=np.int64) for _ in range(4)))
    win_pred, win_true = [], []
    explicit = Path(args.decisions) if args.decisions else None
    if explicit is not None:
        _need(explicit, "decisions file")
    for p, t, dec in _pairs(pred, truth):
        pc, tc = read_tile(p), read_tile(t)
        if len(pc) != len(tc):
            raise UsageError(f"{p.name}: {len(pc)} predicted labels for {len(tc)} truth points")
        total = total + point_counts(pc.labels, tc.labels)
        dec = explicit or dec
        if dec is not None and dec.exists():
            decisions = read_decisions(dec)
            win_pred += [d.decision for d in decisions]
            win_true += window_truth(tc, decisions, args.window_side, args.min_tower_points).tolist()
    f1 = f1_score(win_pred, win_true).f1 if win_pred else _point_f1(total)
    report = make_report(total, f1)
    print(report.table())
    if args.report:
        Path(args.report).write_text(report.to_csv())
    return 0


def _point_f1(counts: ConfusionCounts) -> float:
    tp, fp, fn = int(counts.tp[0]), int(counts.fp[0]), int(counts.fn[0])
    den = 2 * tp + fp + fn
    return 2 * tp / den if den else 0.0


def cmd_ablate(args) -> int:
    base = _train_config(args)
    wdir = _need(args.windows, "windows directory", is_dir=True)
    train, val, test = (load_split(wdir, s) for s in ("train", "val", "test"))
    seeds = [int(s) for s in args.seeds.split(",")]
    variants = tuple(args.variants.split(","))
    configs = ablation_grid(base, args.grid, variants)
    rows = run_ablation(configs, seeds, train, val, test, test_blocks=_test_blocks(wdir))
    text = ablation_csv(rows)
    Path(args.out).write_text(text)
    print(text, end="")
    return 0


# --------------------------------------------------------------------------
# parser


def _add_train_flags(p):
    d = TrainConfig()
    p.add_argument("--windows", required=True, help="output directory of `prep`")
    p.add_argument("--config", help="key=value file with training options (flags win)")
    p.add_argument("--epochs", type=int, help=f"maximum epochs (default {d.epochs})")
    p.add_argument("--batch-size", type=int, help=f"mini-batch size (default {d.batch_size})")
    p.add_argument("--n-points", type=int, help=f"points per sample (default {d.n_points})")
    p.add_argument("--lr", type=float, help=f"initial learning rate (default {d.initial_lr})")
    p.add_argument("--beta", type=float, help=f"class-balance beta, 0 = uniform (default {d.beta})")
    p.add_argument("--sampler", choices=["constrained", "random"], help="point sampler (default constrained)")
    p.add_argument("--no-color", action="store_true", help="zero the green, blue and NDVI features")
    p.add_argument("--variant", choices=["light", "full"], help="network width (default light)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--plateau-patience", type=int, help="epochs before halving the learning rate")
    p.add_argument("--early-stop-patience", type=int, help="epochs without improvement before stopping")
    p.add_argument("--background-fraction", type=float,
                   help="share of tower-free windows kept for segmentation (default 0.05)")
    p.add_argument("--threads", type=int, help="worker threads (default 1 for training)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="towerseg",
                                     description="Tower detection and segmentation in airborne LiDAR.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic labelled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extent", type=float, default=320.0, help="scene side in metres")
    p.add_argument("--density", type=float, default=8.0, help="points per square metre")
    p.add_argument("--towers", type=int, default=3, help="towers per scene when --prevalence is unset")
    p.add_argument("--prevalence", type=float, help="share of 40 m windows holding a tower")
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--no-color-signal", action="store_true", help="same radiometry for every class")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prep", help="HAG, filtering and window extraction for a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window-side", type=float, default=40.0)
    p.add_argument("--split-side", type=float, default=20.0)
    p.add_argument("--min-tower-points", type=int, default=20)
    p.add_argument("--max-height", type=float, default=100.0)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_prep)

    for name, func, text in (("train-cls", cmd_train_cls, "train the window classifier"),
                             ("train-seg", cmd_train_seg, "train the point segmenter")):
        p = sub.add_parser(name, help=text)
        _add_train_flags(p)
        p.add_argument("--out", required=True, help="directory for the checkpoint and history CSV")
        p.set_defaults(func=func)

    p = sub.add_parser("infer", help="classify-then-segment every block of a split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--cls", required=True, help="classifier checkpoint")
    p.add_argument("--seg", required=True, help="segmenter checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--blocks", help="comma-separated block ids (subset of the split)")
    p.add_argument("--window-side", type=float, default=40.0)
    p.add_argument("--stride", type=float, default=40.0)
    p.add_argument("--threshold", type=float, default=0.5, help="tower probability threshold")
    p.add_argument("--n-points-cls", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="compare predicted and true labels")
    p.add_argument("--pred", required=True, help="predicted tile, or directory of `infer` output")
    p.add_argument("--truth", required=True, help="truth tile, or corpus directory")
    p.add_argument("--decisions", help="decisions CSV for window F1 (single-tile mode)")
    p.add_argument("--window-side", type=float, default=40.0)
    p.add_argument("--min-tower-points", type=int, default=20)
    p.add_argument("--report", help="write the report as CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score the ablation grid")
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="CSV file for the result table")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--grid", choices=["axes", "full"], default="axes")
    p.add_argument("--variants", default="light", help="comma-separated: light,full")
    p.set_defaults(func=cmd_ablate)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    training = args.command in ("train-cls", "train-seg", "ablate")
    try:
        limit = _threads(args, 1 if training else os.cpu_count() or 1)
        with threadpool_limits(limits=limit):
            return args.func(args)
    except UsageError as exc:
        print(f"towerseg {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported, not swallowed
        log.debug("traceback", exc_info=True)
        print(f"towerseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
