"""Corpus-level orchestration shared by the command line and the tests:
window extraction, evaluation and the ablation grid."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checkpoint import ModelCheckpoint, model_from_checkpoint
from .cloud_model import ClassLabel, GroundModel, PointCloud, Window, read_ground, read_tile
from .inference_pipeline import WindowDecision
from .metrics import ConfusionCounts, MetricsReport, f1_score, iou_from_counts
from .preprocess import build_line_windows, build_training_windows, normalize_unit_sphere, preprocess_scene, read_windows, \
    tile_sliding, write_windows
from .synthgen import read_corpus_index
from .training import (COLOR_COLUMNS, TOWER, TrainConfig, assemble_classification_set,
                       assemble_segmentation_set, predict_proba, train_model)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
BINARY_CLASSES = ["tower", "other"]


def load_block(corpus_dir, block_id: str) -> tuple[PointCloud, GroundModel]:
    corpus_dir = Path(corpus_dir)
    return read_tile(corpus_dir / f"{block_id}.pct"), read_ground(corpus_dir / f"{block_id}.ground.csv")


def block_windows(cloud: PointCloud, ground: GroundModel, block_id: str, window_side: float = 40.0,
                  split_side: float = 20.0, min_tower_points: int = 20,
                  max_height: float = 100.0) -> list[Window]:
    """Training windows of one block.

    Tower-centred positives and their tower-free twins, then tower-free
    windows centred on power lines, then the tiling windows that hold no
    tower point.
    """
    filtered, _, hag = preprocess_scene(cloud, ground, max_height)
    filtered = filtered.subset(np.arange(len(filtered)), bounds=hag.bounds)
    pairs = build_training_windows(filtered, split_side, window_side, min_tower_points, block_id)
    out = [p for p, _ in pairs] + [n for _, n in pairs if len(n)]
    out += build_line_windows(filtered, split_side, window_side, min_tower_points, block_id)
    out += [w for w in tile_sliding(filtered, window_side, window_side, block_id)
            if not w.contains_target]
    return out


def prepare_corpus(corpus_dir, out_dir, threads: int = 1, **window_kw) -> dict[str, int]:
    """Extract windows for every block and store them per split."""
    rows = read_corpus_index(corpus_dir)
    out_dir = Path(out_dir)

    def one(row):
        cloud, ground = load_block(corpus_dir, row["block_id"])
        return block_windows(cloud, ground, row["block_id"], **window_kw)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        per_block = list(pool.map(one, rows))
    sizes = {}
    for split in SPLITS:
        windows = [w for row, ws in zip(rows, per_block) if row["split"] == split for w in ws]
        write_windows(windows, out_dir / split)
        sizes[split] = len(windows)
    return sizes


def load_split(windows_dir, split: str) -> list[Window]:
    return read_windows(Path(windows_dir) / split)


# --------------------------------------------------------------------------
# evaluation


def binary_tower(labels) -> np.ndarray:
    """Map scene labels to 0 = tower, 1 = anything else."""
    return np.where(np.asarray(labels) == ClassLabel.TOWER, 0, 1)


def point_counts(pred_labels, truth_labels) -> ConfusionCounts:
    return ConfusionCounts.from_labels(binary_tower(pred_labels), binary_tower(truth_labels), 2)


def window_truth(truth: PointCloud, decisions: Sequence[WindowDecision], side: float,
                 min_tower_points: int = 20) -> np.ndarray:
    """True when the half-open footprint of a decision holds enough tower points."""
    tower = truth.labels == ClassLabel.TOWER
    tx, ty = truth.x[tower].astype(np.float64), truth.y[tower].astype(np.float64)
    h = side / 2
    out = np.zeros(len(decisions), dtype=bool)
    for i, d in enumerate(decisions):
        inside = (tx >= d.center_x - h) & (tx < d.center_x + h) & (ty >= d.center_y - h) & (ty < d.center_y + h)
        out[i] = np.count_nonzero(inside) >= min_tower_points
    return out


def make_report(counts: ConfusionCounts, f1: float) -> MetricsReport:
    return MetricsReport(BINARY_CLASSES, counts, f1, iou_from_counts(counts).miou)


def evaluate_classifier(ckpt: ModelCheckpoint, windows: Sequence[Window], n_points: int, seed: int = 0):
    """Window F1 of a classifier on unaugmented, constrained-sampled windows."""
    cfg = replace(_cfg_of(ckpt), n_points=n_points, seed=seed)
    data = assemble_classification_set(windows, cfg, augment=False)
    probs = predict_proba(model_from_checkpoint(ckpt), data.features)[:, TOWER]
    return f1_score(probs >= 0.5, data.targets == TOWER)


def evaluate_segmenter(ckpt: ModelCheckpoint, windows: Iterable[Window]) -> ConfusionCounts:
    """Point confusion (tower vs other) of a segmenter run on every point of
    each tower window, as at inference time."""
    model = model_from_checkpoint(ckpt)
    use_color = _cfg_of(ckpt).use_color_nir
    total = ConfusionCounts(*(np.zeros(2, dtype=np.int64) for _ in range(4)))
    for w in windows:
        if not w.contains_target:
            continue
        rows = normalize_unit_sphere(w).rows
        if not use_color:
            rows[:, COLOR_COLUMNS] = 0.0
        pred_tower = predict_proba(model, rows[None])[0].argmax(axis=1) == TOWER
        pred = np.where(pred_tower, ClassLabel.TOWER, ClassLabel.BACKGROUND)
        total = total + point_counts(pred, w.labels)
    return total


def _cfg_of(ckpt: ModelCheckpoint) -> TrainConfig:
    return TrainConfig.from_mapping(ckpt.metadata.get("train", {}))


# --------------------------------------------------------------------------
# ablation

ABLATION_HEADER = ["model", "rgb_nir", "sampling", "beta", "weights_cls", "weights_seg", "seed",
                   "params_cls", "params_seg", "f1", "iou_tower", "iou_other", "miou",
                   "epochs_cls", "epochs_seg"]


@dataclass(frozen=True)
class AblationRow:
    cfg: TrainConfig
    weights_cls: tuple
    weights_seg: tuple
    params_cls: int
    params_seg: int
    f1: float
    iou_tower: float
    iou_other: float
    miou: float
    epochs_cls: int
    epochs_seg: int

    def as_list(self) -> list:
        c = self.cfg
        return [c.variant, "on" if c.use_color_nir else "off", c.sampler_mode.value, c.beta,
                "[" + " ".join(f"{v:.2f}" for v in self.weights_cls) + "]",
                "[" + " ".join(f"{v:.2f}" for v in self.weights_seg) + "]", c.seed,
                self.params_cls, self.params_seg, f"{self.f1:.4f}", f"{self.iou_tower:.4f}",
                f"{self.iou_other:.4f}", f"{self.miou:.4f}", self.epochs_cls, self.epochs_seg]


def ablation_grid(base: TrainConfig, mode: str = "axes", variants=("light",)) -> list[TrainConfig]:
    """Configurations to compare.

    ``axes`` varies one factor at a time around ``base`` (sampling, colour,
    beta 0.9 and 0.9999, then the other variants); ``full`` is the product
    of features x sampling x beta x variant.
    """
    if mode == "full":
        return [replace(base, variant=v, use_color_nir=c, sampler_mode=s, beta=b)
                for v in variants for c in (True, False) for s in ("constrained", "random")
                for b in (0.9, 0.999, 0.9999)]
    if mode != "axes":
        raise ValueError("grid mode must be 'axes' or 'full'")
    grid = [base, replace(base, sampler_mode="random"), replace(base, use_color_nir=False),
            replace(base, beta=0.9), replace(base, beta=0.9999)]
    grid += [replace(base, variant=v) for v in variants if v != base.variant]
    unique = []
    for cfg in grid:
        if cfg not in unique:
            unique.append(cfg)
    return unique


def run_ablation_config(cfg: TrainConfig, train: Sequence[Window], val: Sequence[Window],
                        test: Sequence[Window], test_blocks=()) -> AblationRow:
    cls_ckpt, cls_hist = train_model(assemble_classification_set(train, cfg),
                                     assemble_classification_set(val, cfg, augment=False),
                                     "cls", cfg, test_blocks=test_blocks)
    seg_ckpt, seg_hist = train_model(assemble_segmentation_set(train, cfg),
                                     assemble_segmentation_set(val, cfg, augment=False),
                                     "seg", cfg, test_blocks=test_blocks)
    f1 = evaluate_classifier(cls_ckpt, test, cfg.n_points, cfg.seed).f1
    iou = iou_from_counts(evaluate_segmenter(seg_ckpt, test))
    n_params = lambda ck: int(sum(v.size for k, v in ck.tensors.items() if k.startswith("param/")))
    return AblationRow(cfg, tuple(cls_ckpt.metadata["class_weights"]),
                       tuple(seg_ckpt.metadata["class_weights"]), n_params(cls_ckpt), n_params(seg_ckpt),
                       f1, float(iou.per_class[0]), float(iou.per_class[1]), iou.miou,
                       len(cls_hist), len(seg_hist))


def run_ablation(configs: Sequence[TrainConfig], seeds: Sequence[int], train, val, test,
                 test_blocks=()) -> list[AblationRow]:
    rows = []
    for seed in seeds:
        for cfg in configs:
            row = run_ablation_config(replace(cfg, seed=seed), train, val, test, test_blocks)
            log.info("ablation %s", row.as_list())
            rows.append(row)
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    for r in rows:
        w.writerow(r.as_list())
    return buf.getvalue()
