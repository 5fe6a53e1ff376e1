"""Scene preprocessing: height above ground, filtering, tiling and the
model-facing feature matrix."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .cloud_model import (ClassLabel, GroundModel, HeightFrame, PointCloud, Window,
                          write_tile)

FEATURE_COLUMNS = ("x", "y", "z", "intensity", "green", "blue", "ndvi")
N_FEATURES = len(FEATURE_COLUMNS)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Per-point model input, ``rows`` is ``(n, 7)`` float32.

    ``centroid`` and ``scale`` undo the unit-sphere mapping:
    ``xyz = rows[:, :3] * scale + centroid``.
    """

    rows: np.ndarray
    centroid: np.ndarray
    scale: float

    @property
    def n(self) -> int:
        return len(self.rows)


def compute_hag(cloud: PointCloud, ground: GroundModel) -> PointCloud:
    """Convert sea-level heights to clamped heights above the ground raster."""
    if cloud.height_frame != HeightFrame.HAS:
        raise ValueError("compute_hag expects a cloud in the HAS frame")
    r, c, inside = ground.cell_index(cloud.x, cloud.y)
    if not inside.all():
        bad = np.flatnonzero(~inside)
        raise ValueError(f"points outside ground raster footprint: {bad[:20].tolist()}")
    data = cloud.data.copy()
    hag = cloud.z.astype(np.float64) - ground.elevation[r, c]
    data[:, 2] = np.maximum(hag, 0.0)
    return PointCloud(data, cloud.labels, HeightFrame.HAG, cloud.bounds)


def filter_points(cloud: PointCloud, max_height: float = 100.0) -> PointCloud:
    """Keep points with ``0 < z <= max_height`` (drops ground and high noise)."""
    _require_hag(cloud)
    return cloud.subset(_keep_mask(cloud.z, max_height))


def _keep_mask(z: np.ndarray, max_height: float) -> np.ndarray:
    return (z > 0) & (z <= max_height)


def _require_hag(cloud: PointCloud) -> None:
    if cloud.height_frame != HeightFrame.HAG:
        raise ValueError("operation requires a HAG cloud")


def tile_sliding(cloud: PointCloud, side: float = 40.0, stride: float = 40.0,
                 source_block_id: str = "", index: np.ndarray | None = None) -> list[Window]:
    """Cut the cloud into square windows on a grid anchored at its bounds.

    Cell membership is half-open, ``[start, start + side)``, so with
    ``stride == side`` every point lands in exactly one window. Windows come
    back in row-major grid order (y rows, then x); empty ones are dropped.
    ``index`` maps cloud rows to scene point ids (defaults to ``arange``).
    """
    _require_hag(cloud)
    if not side > 0 or not 0 < stride <= side:
        raise ValueError("need side > 0 and 0 < stride <= side")
    if len(cloud) == 0:
        return []
    if index is None:
        index = np.arange(len(cloud))
    xmin, ymin, xmax, ymax = cloud.bounds
    dx = cloud.x.astype(np.float64) - xmin
    dy = cloud.y.astype(np.float64) - ymin
    nx = int(np.floor((xmax - xmin) / stride)) + 1
    ix0 = np.floor(dx / stride).astype(np.int64)
    iy0 = np.floor(dy / stride).astype(np.int64)
    reach = int(np.ceil(side / stride))

    keys, rows = [], []
    for ox in range(reach):
        ix = ix0 - ox
        okx = (ix >= 0) & (dx < ix * stride + side)
        for oy in range(reach):
            iy = iy0 - oy
            ok = okx & (iy >= 0) & (dy < iy * stride + side)
            sel = np.flatnonzero(ok)
            keys.append(iy[sel] * nx + ix[sel])
            rows.append(sel)
    keys = np.concatenate(keys)
    rows = np.concatenate(rows)
    order = np.lexsort((rows, keys))
    keys, rows = keys[order], rows[order]
    cuts = np.flatnonzero(np.diff(keys)) + 1
    windows = []
    for seg_keys, seg_rows in zip(np.split(keys, cuts), np.split(rows, cuts)):
        iy, ix = divmod(int(seg_keys[0]), nx)
        windows.append(Window(xmin + ix * stride + side / 2, ymin + iy * stride + side / 2, side,
                              cloud.data[seg_rows], cloud.labels[seg_rows],
                              source_block_id, index[seg_rows]))
    return windows


def build_training_windows(cloud: PointCloud, split_side: float = 20.0, window_side: float = 40.0,
                           min_tower_points: int = 20, source_block_id: str = "",
                           ) -> list[tuple[Window, Window]]:
    """Tower-centred (positive, negative) window pairs.

    Tower-labelled points are split by a fixed ``split_side`` grid; each cell
    with at least ``min_tower_points`` points is one tower. The positive
    window holds everything in the ``window_side`` footprint around the
    tower's mean xy, the negative window the same footprint with tower and
    power-line points removed.
    """
    _require_hag(cloud)
    tower = np.flatnonzero(cloud.labels == ClassLabel.TOWER)
    if len(tower) == 0:
        return []
    xmin, ymin = cloud.bounds[:2]
    cx = np.floor((cloud.x[tower] - xmin) / split_side).astype(np.int64)
    cy = np.floor((cloud.y[tower] - ymin) / split_side).astype(np.int64)
    cells, inverse, counts = np.unique(np.stack([cy, cx], axis=1), axis=0,
                                       return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    x64 = cloud.x.astype(np.float64)
    y64 = cloud.y.astype(np.float64)
    half = window_side / 2
    not_target = (cloud.labels != ClassLabel.TOWER) & (cloud.labels != ClassLabel.POWER_LINE)
    pairs = []
    for k in range(len(cells)):
        if counts[k] < min_tower_points:
            continue
        members = tower[inverse == k]
        mx, my = x64[members].mean(), y64[members].mean()
        inside = (np.abs(x64 - mx) <= half) & (np.abs(y64 - my) <= half)
        pos = np.flatnonzero(inside)
        neg = np.flatnonzero(inside & not_target)
        pairs.append((
            Window(mx, my, window_side, cloud.data[pos], cloud.labels[pos], source_block_id, pos),
            Window(mx, my, window_side, cloud.data[neg], cloud.labels[neg], source_block_id, neg),
        ))
    return pairs


def build_line_windows(cloud: PointCloud, split_side: float = 20.0, window_side: float = 40.0,
                       min_line_points: int = 20, source_block_id: str = "") -> list[Window]:
    """Tower-free windows centred on power-line stretches.

    Power-line points are split by the ``split_side`` grid like towers; each
    cell with at least ``min_line_points`` points gives a window around its
    mean xy, kept only when the footprint holds no tower point. These are
    the hard negatives that tower-centred pairs lack, since the negative of
    a pair has its wires removed along with the tower.
    """
    _require_hag(cloud)
    line = np.flatnonzero(cloud.labels == ClassLabel.POWER_LINE)
    if len(line) == 0:
        return []
    xmin, ymin = cloud.bounds[:2]
    cx = np.floor((cloud.x[line] - xmin) / split_side).astype(np.int64)
    cy = np.floor((cloud.y[line] - ymin) / split_side).astype(np.int64)
    cells, inverse, counts = np.unique(np.stack([cy, cx], axis=1), axis=0,
                                       return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    x64 = cloud.x.astype(np.float64)
    y64 = cloud.y.astype(np.float64)
    half = window_side / 2
    windows = []
    for k in range(len(cells)):
        if counts[k] < min_line_points:
            continue
        members = line[inverse == k]
        mx, my = x64[members].mean(), y64[members].mean()
        inside = np.flatnonzero((np.abs(x64 - mx) <= half) & (np.abs(y64 - my) <= half))
        if np.any(cloud.labels[inside] == ClassLabel.TOWER):
            continue
        windows.append(Window(mx, my, window_side, cloud.data[inside], cloud.labels[inside],
                              source_block_id, inside))
    return windows


def ndvi(nir, red):
    """Normalised difference vegetation index, 0 where ``nir + red == 0``."""
    nir = np.asarray(nir, dtype=np.float64)
    red = np.asarray(red, dtype=np.float64)
    den = nir + red
    out = np.divide(nir - red, den, out=np.zeros(np.broadcast(nir, red).shape), where=den != 0)
    return out if out.ndim else float(out)


def normalize_unit_sphere(window: Window, reference: Window | None = None) -> FeatureMatrix:
    """Centre xyz on the centroid and scale into the unit ball.

    Centroid and scale come from ``reference`` when given, so a sample of a
    window lands in the same frame as the full window. Columns of the
    result follow :data:`FEATURE_COLUMNS`.
    """
    ref = window if reference is None else reference
    if len(window) == 0 or len(ref) == 0:
        raise ValueError("cannot normalise an empty window")
    ref_xyz = ref.data[:, :3].astype(np.float64)
    centroid = ref_xyz.mean(axis=0)
    radius = float(np.sqrt(((ref_xyz - centroid)**2).sum(axis=1)).max())
    scale = radius if radius > 0 else 1.0
    d = window.data
    xyz = d[:, :3].astype(np.float64) - centroid
    rows = np.empty((len(d), N_FEATURES), dtype=np.float32)
    rows[:, :3] = xyz / scale
    rows[:, 3] = d[:, 3]  # intensity
    rows[:, 4] = d[:, 5]  # green
    rows[:, 5] = d[:, 6]  # blue
    rows[:, 6] = ndvi(d[:, 7], d[:, 4])
    return FeatureMatrix(rows, centroid, scale)


def preprocess_scene(cloud: PointCloud, ground: GroundModel, max_height: float = 100.0,
                     ) -> tuple[PointCloud, np.ndarray, np.ndarray]:
    """HAG + filter, also returning the kept scene indices and the HAG cloud.

    Returns ``(filtered, kept_index, hag)``.
    """
    hag = compute_hag(cloud, ground)
    keep = _keep_mask(hag.z, max_height)
    return hag.subset(keep), np.flatnonzero(keep), hag


# --------------------------------------------------------------------------


INDEX_HEADER = ["window_id", "source_block_id", "center_x", "center_y", "side", "contains_target"]


def write_windows(windows: Sequence[Window], directory, prefix: str = "w") -> Path:
    """Persist windows as PCT1 tiles plus an ``index.csv`` sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index_path = directory / "index.csv"
    with open(index_path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(INDEX_HEADER)
        for i, w in enumerate(windows):
            wid = f"{prefix}{i:06d}"
            write_tile(w.as_cloud(), directory / f"{wid}.pct")
            out.writerow([wid, w.source_block_id, repr(float(w.center_x)), repr(float(w.center_y)),
                          repr(float(w.side)), int(w.contains_target)])
    return index_path


def read_windows(directory) -> list[Window]:
    from .cloud_model import read_tile

    directory = Path(directory)
    windows = []
    with open(directory / "index.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            cloud = read_tile(directory / f"{row['window_id']}.pct")
            w = Window(float(row["center_x"]), float(row["center_y"]), float(row["side"]),
                       cloud.data, cloud.labels, row["source_block_id"])
            if w.contains_target != bool(int(row["contains_target"])):
                raise ValueError(f"index disagrees with tile labels for {row['window_id']}")
            windows.append(w)
    return windows
