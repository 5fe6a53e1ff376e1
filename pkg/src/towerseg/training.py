"""Dataset assembly and the epoch loop for both networks."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import ModelCheckpoint, checkpoint_from_model
from .cloud_model import ClassLabel, Window
from .nn_engine import (ClassWeights, OptimizerState, adam_step, class_balanced_weights, log_softmax,
                        log_softmax_backward, plateau_schedule, weighted_nll_loss)
from .pointnet_models import ORTHO_PENALTY, ArchitectureSpec, PointNetModel, build_model, make_spec
from .preprocess import N_FEATURES, normalize_unit_sphere
from .sampling import SamplerConfig, SamplerMode, augment_xy_jitter, sample

log = logging.getLogger(__name__)

COLOR_COLUMNS = slice(4, 7)  # green, blue, ndvi
BACKGROUND, TOWER = 0, 1  # network class indices


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    n_points: int = 2048
    initial_lr: float = 1e-3
    plateau_patience: int = 10
    early_stop_patience: int = 10
    beta: float = 0.999
    sampler_mode: SamplerMode = SamplerMode.CONSTRAINED
    use_color_nir: bool = True
    variant: str = "light"
    seed: int = 0
    background_keep_fraction_seg: float = 0.05
    max_shift: float = 10.0
    penalty: float = ORTHO_PENALTY

    def __post_init__(self):
        object.__setattr__(self, "sampler_mode", SamplerMode(self.sampler_mode))
        for name in ("epochs", "batch_size", "n_points", "plateau_patience", "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")
        if not 0 <= self.background_keep_fraction_seg <= 1:
            raise ValueError("background_keep_fraction_seg must lie in [0, 1]")
        if self.variant not in ("light", "full"):
            raise ValueError("variant must be 'light' or 'full'")

    @property
    def sampler(self) -> SamplerConfig:
        return SamplerConfig(n_target=self.n_points, mode=self.sampler_mode, seed=self.seed)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string values, e.g. a parsed key=value file."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ValueError(f"unknown training option {key!r}")
            kwargs[key] = _coerce(known[key].type, raw)
        return cls(**kwargs)

    def to_mapping(self) -> dict:
        d = asdict(self)
        d["sampler_mode"] = self.sampler_mode.value
        return d


def _coerce(kind, raw):
    if not isinstance(raw, str):
        return raw
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return raw.strip()


def parse_key_values(text: str) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"line {lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out


# --------------------------------------------------------------------------
# datasets


@dataclass(eq=False)
class Dataset:
    """Fixed-size samples ready for the network.

    ``targets`` is ``(m,)`` for classification and ``(m, n)`` for
    segmentation, holding network class indices (0 background, 1 tower).
    """

    features: np.ndarray
    targets: np.ndarray
    block_ids: list[str] = field(default_factory=list)
    window_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.features.ndim != 3 or self.features.shape[2] != N_FEATURES:
            raise ValueError(f"features must be (m, n, {N_FEATURES})")
        if len(self.targets) != len(self.features):
            raise ValueError("one target entry per sample required")
        if not self.block_ids:
            self.block_ids = [""] * len(self)
        if not self.window_ids:
            self.window_ids = [""] * len(self)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def task(self) -> str:
        return "cls" if self.targets.ndim == 1 else "seg"

    def class_counts(self, k: int = 2) -> np.ndarray:
        return np.bincount(self.targets.reshape(-1), minlength=k)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.targets[idx],
                       [self.block_ids[i] for i in idx], [self.window_ids[i] for i in idx])


def window_features(window: Window, cfg: TrainConfig) -> tuple[np.ndarray, Window]:
    """Sample to ``n_points`` in the frame of the full window, mask colour if disabled.

    Normalisation statistics come from the whole window, as at inference,
    so the segmenter sees the same coordinates whether or not it is sampled.
    """
    picked = sample(window, cfg.sampler)
    rows = normalize_unit_sphere(picked, reference=window).rows
    if not cfg.use_color_nir:
        rows[:, COLOR_COLUMNS] = 0.0
    return rows, picked


def _expand_positives(windows: Sequence[Window], cfg: TrainConfig, augment: bool):
    """Yield windows in input order, each positive followed by its jittered copy."""
    for w in windows:
        yield w
        if augment and w.contains_target:
            yield augment_xy_jitter(w, cfg.max_shift, cfg.seed)


def assemble_classification_set(windows: Sequence[Window], cfg: TrainConfig,
                                augment: bool = True) -> Dataset:
    """Window-level samples: label 1 for tower windows, 0 otherwise.

    With ``augment`` every tower window also contributes one rigidly
    jittered copy, doubling the positives.
    """
    if not any(w.contains_target for w in windows):
        raise ValueError("classification set has no tower windows")
    feats, targets, blocks, ids = [], [], [], []
    for w in _expand_positives(windows, cfg, augment):
        rows, _ = window_features(w, cfg)
        feats.append(rows)
        targets.append(TOWER if w.contains_target else BACKGROUND)
        blocks.append(w.source_block_id)
        ids.append(w.window_id)
    return Dataset(np.stack(feats), np.asarray(targets), blocks, ids)


def keep_background(n: int, fraction: float, seed: int) -> np.ndarray:
    """Seeded subset of ``round(fraction * n)`` positions, in input order."""
    k = int(round(fraction * n))
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x5E6])
    return np.sort(rng.choice(n, size=k, replace=False))


def assemble_segmentation_set(windows: Sequence[Window], cfg: TrainConfig,
                              augment: bool = True) -> Dataset:
    """Per-point samples from tower windows plus a seeded fraction of the rest."""
    positives = [w for w in windows if w.contains_target]
    if not positives:
        raise ValueError("segmentation set has no tower windows")
    negatives = [w for w in windows if not w.contains_target]
    kept = set(keep_background(len(negatives), cfg.background_keep_fraction_seg, cfg.seed).tolist())
    negative_pos = {id(w): i for i, w in enumerate(negatives)}
    chosen = [w for w in windows if w.contains_target or negative_pos[id(w)] in kept]
    feats, targets, blocks, ids = [], [], [], []
    for w in _expand_positives(chosen, cfg, augment):
        rows, picked = window_features(w, cfg)
        feats.append(rows)
        targets.append((picked.labels == ClassLabel.TOWER).astype(np.int64))
        blocks.append(w.source_block_id)
        ids.append(w.window_id)
    return Dataset(np.stack(feats), np.stack(targets), blocks, ids)


def check_block_hygiene(train: Dataset, val: Dataset | None, test_blocks=()) -> None:
    """Refuse any overlap between train/validation blocks and held-out blocks."""
    test_blocks = set(test_blocks) - {""}
    train_blocks = set(train.block_ids) - {""}
    val_blocks = set(val.block_ids) - {""} if val is not None else set()
    leaked = (train_blocks | val_blocks) & test_blocks
    if leaked:
        raise ValueError(f"test blocks used for training or validation: {sorted(leaked)}")
    shared = train_blocks & val_blocks
    if shared:
        raise ValueError(f"blocks in both train and validation sets: {sorted(shared)}")


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr", "seconds"])
        for i in range(len(self)):
            w.writerow([i + 1, repr(self.train_loss[i]), repr(self.val_loss[i]),
                        repr(self.lr[i]), f"{self.seconds[i]:.3f}"])
        return buf.getvalue()


class TrainingDiverged(RuntimeError):
    pass


def _batch_loss(model: PointNetModel, x, y, weights: ClassWeights):
    """Forward pass; returns (data loss, grad wrt logits, logits)."""
    logits = model.forward(x)
    k = logits.shape[-1]
    lp = log_softmax(logits.reshape(-1, k))
    loss, g = weighted_nll_loss(lp, y.reshape(-1), weights)
    return loss, log_softmax_backward(lp, g).reshape(logits.shape), logits


def evaluate_loss(model: PointNetModel, data: Dataset, weights: ClassWeights,
                  batch_size: int = 32) -> float:
    """Weighted NLL over the whole set in eval mode (no penalty term)."""
    model.eval()
    w = weights.weights
    num = den = 0.0
    for s in range(0, len(data), batch_size):
        logits = model.forward(data.features[s:s + batch_size])
        k = logits.shape[-1]
        lp = log_softmax(logits.reshape(-1, k).astype(np.float64))
        y = data.targets[s:s + batch_size].reshape(-1)
        wt = w[y]
        num -= float((wt * lp[np.arange(len(y)), y]).sum())
        den += float(wt.sum())
    return num / den


def predict_proba(model: PointNetModel, features: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Eval-mode class probabilities, ``(m, k)`` or ``(m, n, k)``."""
    model.eval()
    out = []
    for s in range(0, len(features), batch_size):
        logits = model.forward(features[s:s + batch_size]).astype(np.float64)
        out.append(np.exp(log_softmax(logits)))
    return np.concatenate(out)


def train_model(dataset: Dataset, val_dataset: Dataset, task: str, cfg: TrainConfig,
                spec: ArchitectureSpec | None = None, test_blocks=(),
                progress: Callable[[int, TrainHistory], None] | None = None,
                ) -> tuple[ModelCheckpoint, TrainHistory]:
    """Train one network; returns the best-validation checkpoint and history.

    Each epoch shuffles the training set into ``batch_size`` batches and
    minimises the class-balanced NLL plus ``cfg.penalty`` times the
    feature-transform orthogonality penalty. The learning rate follows the
    plateau rule on validation loss; training stops after
    ``early_stop_patience`` epochs without validation improvement.
    """
    if task not in ("cls", "seg"):
        raise ValueError("task must be 'cls' or 'seg'")
    if len(dataset) == 0 or len(val_dataset) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if dataset.task != task or val_dataset.task != task:
        raise ValueError(f"datasets do not match task {task!r}")
    check_block_hygiene(dataset, val_dataset, test_blocks)
    spec = spec or make_spec(cfg.variant, task)
    if spec.task != task:
        raise ValueError("architecture task differs from training task")
    model = build_model(spec, seed=cfg.seed)
    weights = class_balanced_weights(dataset.class_counts(spec.k), cfg.beta)
    state = OptimizerState(lr=cfg.initial_lr, patience=cfg.plateau_patience)
    rng = np.random.default_rng([int(cfg.seed) & 0xFFFFFFFF, 0xBA7C])
    history = TrainHistory()
    best = (math.inf, None)
    stale = 0
    m = len(dataset)
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr = state.lr
        model.train()
        order = rng.permutation(m)
        losses, sizes = [], []
        for s in range(0, m, cfg.batch_size):
            idx = np.sort(order[s:s + cfg.batch_size])
            if len(idx) < 2:
                continue  # batch statistics need two samples
            loss, g, _ = _batch_loss(model, dataset.features[idx], dataset.targets[idx], weights)
            total = loss + cfg.penalty * model.penalty
            if not math.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, batch {s // cfg.batch_size}"
                                       f" (data {loss}, penalty {model.penalty}, lr {state.lr})")
            model.zero_grad()
            model.backward(g, penalty_coef=cfg.penalty)
            adam_step(model.parameters(), state)
            losses.append(total)
            sizes.append(len(idx))
        train_loss = float(np.average(losses, weights=sizes)) if losses else math.nan
        val_loss = evaluate_loss(model, val_dataset, weights, cfg.batch_size)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch + 1} (lr {state.lr})")
        plateau_schedule(state, val_loss)
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.lr.append(lr)
        history.seconds.append(time.perf_counter() - start)
        if val_loss < best[0] - state.min_improvement or best[1] is None:
            best = (val_loss, _snapshot(model))
            history.best_epoch = epoch + 1
            stale = 0
        else:
            stale += 1
        log.info("%s epoch %d train %.5f val %.5f lr %.2e (%.1fs)", task, epoch + 1, train_loss,
                 val_loss, lr, history.seconds[-1])
        if progress is not None:
            progress(epoch + 1, history)
        if stale >= cfg.early_stop_patience:
            break
    _restore(model, best[1])
    model.eval()
    meta = {
        "task": task,
        "train": cfg.to_mapping(),
        "class_weights": [float(v) for v in weights.weights],
        "class_counts": [int(c) for c in weights.counts],
        "best_epoch": history.best_epoch,
        "best_val_loss": best[0],
        "columns_masked": [] if cfg.use_color_nir else ["green", "blue", "ndvi"],
    }
    return checkpoint_from_model(model, meta), history


def _snapshot(model: PointNetModel):
    return ({k: p.data.copy() for k, p in model.parameters().items()},
            {k: v.copy() for k, v in model.buffers().items()})


def _restore(model: PointNetModel, snap) -> None:
    params, bufs = snap
    for k, p in model.parameters().items():
        p.data[...] = params[k]
    for k, v in model.buffers().items():
        v[...] = bufs[k]


def config_from_checkpoint(ckpt: ModelCheckpoint) -> TrainConfig:
    return TrainConfig.from_mapping(ckpt.metadata.get("train", {}))


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
