"""Classify-then-segment inference over a whole scene."""

from __future__ import annotations

import csv
import io
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import ModelCheckpoint, load_checkpoint, model_from_checkpoint
from .cloud_model import ClassLabel, GroundModel, HeightFrame, PointCloud, Window
from .nn_engine import log_softmax
from .preprocess import normalize_unit_sphere, preprocess_scene, tile_sliding
from .sampling import SamplerConfig, SamplerMode, constrained_sample
from .training import COLOR_COLUMNS, TOWER

DECISIONS_HEADER = ["window_id", "center_x", "center_y", "tower_probability", "decision"]


@dataclass(frozen=True)
class PipelineConfig:
    cls_checkpoint: object = None  # path or ModelCheckpoint
    seg_checkpoint: object = None
    window_side: float = 40.0
    stride: float = 40.0
    cls_threshold: float = 0.5
    n_points_cls: int = 2048
    max_height: float = 100.0
    batch_size: int = 32
    threads: int = 1
    seed: int = 0
    block_id: str = ""

    def __post_init__(self):
        if not 0 <= self.cls_threshold <= 1:
            raise ValueError("cls_threshold must be a probability")
        if not self.window_side > 0 or not 0 < self.stride <= self.window_side:
            raise ValueError("need window_side > 0 and 0 < stride <= window_side")
        if self.n_points_cls < 1 or self.batch_size < 1 or self.threads < 1:
            raise ValueError("n_points_cls, batch_size and threads must be positive")


@dataclass(frozen=True)
class WindowDecision:
    window_id: str
    center_x: float
    center_y: float
    tower_probability: float
    decision: bool


@dataclass
class InferenceResult:
    cloud: PointCloud  # input geometry, HAS frame, predicted labels
    decisions: list[WindowDecision]
    segmented_windows: int = 0
    hag: np.ndarray = field(default=None, repr=False)

    def decisions_csv(self) -> str:
        return decisions_to_csv(self.decisions)


def decisions_to_csv(decisions: Sequence[WindowDecision]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DECISIONS_HEADER)
    for d in decisions:
        w.writerow([d.window_id, repr(float(d.center_x)), repr(float(d.center_y)),
                    f"{d.tower_probability:.6f}", int(d.decision)])
    return buf.getvalue()


def read_decisions(path) -> list[WindowDecision]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DECISIONS_HEADER:
            raise ValueError(f"{path}: expected header {','.join(DECISIONS_HEADER)}")
        return [WindowDecision(r["window_id"], float(r["center_x"]), float(r["center_y"]),
                               float(r["tower_probability"]), bool(int(r["decision"])))
                for r in reader]


# --------------------------------------------------------------------------


class _Model:
    """Eval-mode network plus the feature conventions it was trained with."""

    def __init__(self, ckpt: ModelCheckpoint, task: str):
        if ckpt.spec.task != task:
            raise ValueError(f"expected a {task} checkpoint, got task={ckpt.spec.task}")
        if ckpt.spec.k != 2:
            raise ValueError(f"pipeline needs k=2 networks, checkpoint has k={ckpt.spec.k}")
        self.ckpt = ckpt
        train = ckpt.metadata.get("train", {})
        self.use_color = bool(train.get("use_color_nir", True))
        self.low = float(train.get("low_threshold", 3.0))
        self.mid = float(train.get("mid_threshold", 8.0))
        self._local = threading.local()

    @property
    def net(self):
        # layers cache activations, so each worker thread gets its own copy
        net = getattr(self._local, "net", None)
        if net is None:
            net = self._local.net = model_from_checkpoint(self.ckpt)
        return net

    def features(self, window: Window, reference: Window | None = None) -> np.ndarray:
        rows = normalize_unit_sphere(window, reference).rows
        if not self.use_color:
            rows[:, COLOR_COLUMNS] = 0.0
        return rows

    def proba(self, batch: np.ndarray) -> np.ndarray:
        logits = self.net.forward(batch).astype(np.float64)
        return np.exp(log_softmax(logits))


def _as_checkpoint(obj) -> ModelCheckpoint:
    if isinstance(obj, ModelCheckpoint):
        return obj
    if obj is None:
        raise ValueError("pipeline needs both a classifier and a segmenter checkpoint")
    return load_checkpoint(Path(obj))


def merge_windows(n_points: int, decisions: Sequence[tuple[Window, np.ndarray]]) -> np.ndarray:
    """Reassemble per-window labels into one label per cloud point.

    ``Window.index`` gives each window's positions in the cloud. A point
    that is Tower in any window stays Tower; other covered points are
    Background. Raises if a point is covered by no window.
    """
    tower = np.zeros(n_points, dtype=bool)
    covered = np.zeros(n_points, dtype=bool)
    for window, labels in decisions:
        if window.index is None:
            raise ValueError("windows need point indices to be merged")
        labels = np.asarray(labels)
        if len(labels) != len(window):
            raise ValueError(f"window {window.window_id}: {len(labels)} labels for {len(window)} points")
        covered[window.index] = True
        tower[window.index[labels == ClassLabel.TOWER]] = True
    if not covered.all():
        missing = np.flatnonzero(~covered)
        raise ValueError(f"points not covered by any window: {missing[:20].tolist()}")
    return np.where(tower, ClassLabel.TOWER, ClassLabel.BACKGROUND).astype(np.uint8)


def infer_scene(cloud: PointCloud, ground: GroundModel, cfg: PipelineConfig) -> InferenceResult:
    """Label every point of a HAS scene.

    Windows from the sliding tiling are classified from a constrained
    sample of ``n_points_cls`` points. Windows at or above
    ``cls_threshold`` go through the segmenter with all their points;
    the rest become Background. Ground returns (HAG 0) are labelled Ground
    and returns above ``max_height`` Background.
    """
    cls = _Model(_as_checkpoint(cfg.cls_checkpoint), "cls")
    seg = _Model(_as_checkpoint(cfg.seg_checkpoint), "seg")
    if cloud.height_frame != HeightFrame.HAS:
        raise ValueError("infer_scene expects a HAS cloud")

    filtered, kept, hag = preprocess_scene(cloud, ground, cfg.max_height)
    filtered = filtered.subset(np.arange(len(filtered)), bounds=hag.bounds)
    windows = tile_sliding(filtered, cfg.window_side, cfg.stride, cfg.block_id)
    sampler = SamplerConfig(cfg.n_points_cls, cls.low, cls.mid, SamplerMode.CONSTRAINED, cfg.seed)

    def classify(chunk: list[Window]) -> np.ndarray:
        batch = np.stack([cls.features(constrained_sample(w, sampler), w) for w in chunk])
        return cls.proba(batch)[:, TOWER]

    def segment(window: Window) -> np.ndarray:
        p = seg.proba(seg.features(window)[None])[0]
        return np.where(p.argmax(axis=1) == TOWER, ClassLabel.TOWER, ClassLabel.BACKGROUND)

    chunks = [windows[s:s + cfg.batch_size] for s in range(0, len(windows), cfg.batch_size)]
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        probs = np.concatenate(list(pool.map(classify, chunks))) if chunks else np.zeros(0)
        positive = [w for w, p in zip(windows, probs) if p >= cfg.cls_threshold]
        seg_labels = list(pool.map(segment, positive))

    merged_in = [(w, np.full(len(w), ClassLabel.BACKGROUND)) for w, p in zip(windows, probs)
                 if p < cfg.cls_threshold]
    merged_in += list(zip(positive, seg_labels))
    kept_labels = merge_windows(len(filtered), merged_in)

    labels = np.where(hag.z <= 0, ClassLabel.GROUND, ClassLabel.BACKGROUND).astype(np.uint8)
    labels[kept] = kept_labels
    decisions = [WindowDecision(w.window_id, w.center_x, w.center_y, float(p), bool(p >= cfg.cls_threshold))
                 for w, p in zip(windows, probs)]
    return InferenceResult(cloud.with_labels(labels), decisions, len(positive), hag.z)
