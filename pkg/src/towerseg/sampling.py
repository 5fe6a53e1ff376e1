"""Fixed-size point selection and training-time augmentation."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .cloud_model import Window


class SamplerMode(str, Enum):
    CONSTRAINED = "constrained"
    RANDOM = "random"


@dataclass(frozen=True)
class SamplerConfig:
    n_target: int = 2048
    low_threshold: float = 3.0
    mid_threshold: float = 8.0
    mode: SamplerMode = SamplerMode.CONSTRAINED
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", SamplerMode(self.mode))
        if self.n_target < 1:
            raise ValueError("n_target must be >= 1")
        if not 0 < self.low_threshold < self.mid_threshold:
            raise ValueError("need 0 < low_threshold < mid_threshold")


def window_rng(seed: int, window: Window, salt: str = "") -> np.random.Generator:
    """Random stream keyed on (seed, window id) so worker order is irrelevant."""
    key = zlib.crc32(f"{salt}|{window.window_id}".encode())
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, key])


def _upsample(n: int, n_target: int, rng: np.random.Generator) -> np.ndarray:
    extra = rng.integers(0, n, size=n_target - n)
    return np.concatenate([np.arange(n), extra])


def constrained_sample_index(z: np.ndarray, n_target: int, low: float, mid: float,
                             rng: np.random.Generator) -> np.ndarray:
    """Row indices chosen by height-stratified down-sampling.

    Points below ``low`` are discarded at random first, then points below
    ``mid``, each stage stopping as soon as ``n_target`` remain; any excess
    after that is removed uniformly. Short inputs are padded by duplicates.
    """
    n = len(z)
    if n == 0:
        raise ValueError("cannot sample an empty window")
    if n <= n_target:
        return _upsample(n, n_target, rng)
    keep = np.ones(n, dtype=bool)
    excess = n - n_target
    for threshold in (low, mid):
        stratum = np.flatnonzero(keep & (z < threshold))
        drop = min(excess, len(stratum))
        if drop:
            keep[rng.choice(stratum, size=drop, replace=False)] = False
            excess -= drop
        if excess == 0:
            break
    if excess:
        rest = np.flatnonzero(keep)
        keep[rng.choice(rest, size=excess, replace=False)] = False
    return np.flatnonzero(keep)


def random_sample_index(n: int, n_target: int, rng: np.random.Generator) -> np.ndarray:
    if n == 0:
        raise ValueError("cannot sample an empty window")
    if n <= n_target:
        return _upsample(n, n_target, rng)
    return np.sort(rng.choice(n, size=n_target, replace=False))


def constrained_sample(window: Window, cfg: SamplerConfig) -> Window:
    if cfg.mode != SamplerMode.CONSTRAINED:
        raise ValueError("constrained_sample needs a CONSTRAINED config")
    rng = window_rng(cfg.seed, window, "sample")
    idx = constrained_sample_index(window.data[:, 2], cfg.n_target, cfg.low_threshold,
                                   cfg.mid_threshold, rng)
    return window.replace(keep=idx)


def random_sample(window: Window, cfg: SamplerConfig) -> Window:
    if cfg.mode != SamplerMode.RANDOM:
        raise ValueError("random_sample needs a RANDOM config")
    rng = window_rng(cfg.seed, window, "sample")
    return window.replace(keep=random_sample_index(len(window), cfg.n_target, rng))


def sample(window: Window, cfg: SamplerConfig) -> Window:
    if cfg.mode == SamplerMode.CONSTRAINED:
        return constrained_sample(window, cfg)
    return random_sample(window, cfg)


def augment_xy_jitter(window: Window, max_shift: float = 10.0, seed: int = 0) -> Window:
    """Translate all points by one random (dx, dy); drop what leaves the footprint."""
    if len(window) == 0:
        raise ValueError("cannot jitter an empty window")
    rng = window_rng(seed, window, "jitter")
    dx, dy = rng.uniform(-max_shift, max_shift, size=2)
    data = window.data.astype(np.float64)
    data[:, 0] += dx
    data[:, 1] += dy
    half = window.side / 2
    inside = ((np.abs(data[:, 0] - window.center_x) <= half)
              & (np.abs(data[:, 1] - window.center_y) <= half))
    if not inside.any():
        raise ValueError("jitter moved every point out of the window")
    moved = window.replace(data=data.astype(np.float32))
    return moved.replace(keep=np.flatnonzero(inside))
