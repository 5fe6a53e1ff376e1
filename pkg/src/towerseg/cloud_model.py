"""Point-cloud data types and tile I/O.

A cloud is stored column-wise: one ``(n, 8)`` float32 array holding
``x, y, z, intensity, red, green, blue, nir`` and one uint8 label vector.
Per-point :class:`PointRecord` objects exist for convenience at the edges
but every hot path works on the arrays.
"""

from __future__ import annotations

import io
import math
import random
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

FIELDS = ("x", "y", "z", "intensity", "red", "green", "blue", "nir")
RADIOMETRY = slice(3, 8)
CSV_HEADER = "x,y,z,intensity,r,g,b,nir,label"

MAGIC = b"PCT1"
HEADER_SIZE = len(MAGIC) + 1 + 8  # magic, height frame, point count
RECORD_DTYPE = np.dtype([("f", "<f4", (8,)), ("label", "u1")])
assert RECORD_DTYPE.itemsize == 33


class ClassLabel(IntEnum):
    TOWER = 0
    POWER_LINE = 1
    GROUND = 2
    BACKGROUND = 3


class HeightFrame(IntEnum):
    HAS = 0
    HAG = 1


class LoadError(ValueError):
    """Raised when a tile or raster file cannot be decoded."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class InvariantError(ValueError):
    """Raised when a cloud violates its field invariants."""


@dataclass(frozen=True)
class PointRecord:
    x: float
    y: float
    z: float
    intensity: float = 0.0
    red: float = 0.0
    green: float = 0.0
    blue: float = 0.0
    nir: float = 0.0
    label: ClassLabel = ClassLabel.BACKGROUND


def scale_radiometry(raw, bits: int = 16) -> np.ndarray:
    """Map raw unsigned sensor counts onto [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    return np.clip(raw / float(2**bits - 1), 0.0, 1.0).astype(np.float32)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered set of LiDAR returns.

    ``bounds`` is ``(xmin, ymin, xmax, ymax)``; computed from the points
    when not given. Arrays are copied and frozen at construction.
    """

    data: np.ndarray
    labels: np.ndarray
    height_frame: HeightFrame = HeightFrame.HAS
    bounds: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True).reshape(-1, 8)
        labels = np.array(self.labels, dtype=np.uint8, copy=True).reshape(-1)
        if len(labels) != len(data):
            raise ValueError(f"{len(data)} points but {len(labels)} labels")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "labels", _readonly(labels))
        object.__setattr__(self, "height_frame", HeightFrame(self.height_frame))
        if self.bounds is None:
            object.__setattr__(self, "bounds", xy_bounds(data))
        else:
            object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def x(self) -> np.ndarray:
        return self.data[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.data[:, 1]

    @property
    def z(self) -> np.ndarray:
        return self.data[:, 2]

    def subset(self, mask_or_index, bounds=None) -> "PointCloud":
        return PointCloud(self.data[mask_or_index], self.labels[mask_or_index],
                          self.height_frame, bounds if bounds is not None else self.bounds)

    def validate(self) -> None:
        """Check the field invariants; raise :class:`InvariantError`."""
        bad = ~np.isfinite(self.data).all(axis=1)
        if bad.any():
            raise InvariantError(f"non-finite field at point {int(np.argmax(bad))}")
        rad = self.data[:, RADIOMETRY]
        out = ((rad < 0.0) | (rad > 1.0)).any(axis=1)
        if out.any():
            raise InvariantError(f"radiometry outside [0, 1] at point {int(np.argmax(out))}")
        if self.labels.size and self.labels.max() > max(ClassLabel):
            raise InvariantError(f"unknown label at point {int(np.argmax(self.labels > 3))}")
        if len(self):
            xmin, ymin, xmax, ymax = self.bounds
            if (self.x.min() < xmin or self.x.max() > xmax
                    or self.y.min() < ymin or self.y.max() > ymax):
                raise InvariantError("bounds do not enclose all points")

    def records(self) -> Iterator[PointRecord]:
        for row, lab in zip(self.data.tolist(), self.labels.tolist()):
            yield PointRecord(*row, label=ClassLabel(lab))

    @classmethod
    def from_records(cls, records: Iterable[PointRecord],
                     height_frame=HeightFrame.HAS) -> "PointCloud":
        records = list(records)
        data = np.array([[getattr(r, f) for f in FIELDS] for r in records],
                        dtype=np.float32).reshape(-1, 8)
        labels = np.array([int(r.label) for r in records], dtype=np.uint8)
        return cls(data, labels, height_frame)

    def with_labels(self, labels) -> "PointCloud":
        return PointCloud(self.data, labels, self.height_frame, self.bounds)


def xy_bounds(data: np.ndarray) -> tuple[float, float, float, float]:
    if len(data) == 0:
        return (0.0, 0.0, 0.0, 0.0)
    return (float(data[:, 0].min()), float(data[:, 1].min()),
            float(data[:, 0].max()), float(data[:, 1].max()))


@dataclass(frozen=True, eq=False)
class Window:
    """A square xy footprint of points, the unit of model input.

    ``index`` holds the positions of the points in the scene cloud they
    were cut from; inference uses it to merge labels back.
    """

    center_x: float
    center_y: float
    side: float
    data: np.ndarray
    labels: np.ndarray
    source_block_id: str = ""
    index: np.ndarray | None = None

    def __post_init__(self):
        data = _readonly(np.array(self.data, dtype=np.float32).reshape(-1, 8))
        labels = _readonly(np.array(self.labels, dtype=np.uint8).reshape(-1))
        if len(data) != len(labels):
            raise ValueError(f"{len(data)} points but {len(labels)} labels")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)
        if self.index is not None:
            idx = _readonly(np.array(self.index, dtype=np.int64).reshape(-1))
            if len(idx) != len(labels):
                raise ValueError("index length differs from point count")
            object.__setattr__(self, "index", idx)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def contains_target(self) -> bool:
        return bool((self.labels == ClassLabel.TOWER).any())

    @property
    def window_id(self) -> str:
        return f"{self.source_block_id}@{self.center_x:.3f},{self.center_y:.3f}"

    def replace(self, data=None, labels=None, index=None, keep=None) -> "Window":
        """New window with the same footprint; ``keep`` selects rows first."""
        if keep is not None:
            data = self.data[keep]
            labels = self.labels[keep]
            index = None if self.index is None else self.index[keep]
        return Window(self.center_x, self.center_y, self.side,
                      self.data if data is None else data,
                      self.labels if labels is None else labels,
                      self.source_block_id,
                      self.index if index is None else index)

    def as_cloud(self) -> PointCloud:
        h = self.side / 2
        return PointCloud(self.data, self.labels, HeightFrame.HAG,
                          (self.center_x - h, self.center_y - h,
                           self.center_x + h, self.center_y + h))


@dataclass(frozen=True, eq=False)
class GroundModel:
    """Regular elevation raster. Row 0 is the southern (min y) edge and
    cell ``(r, c)`` covers ``[origin + c*cell, origin + (c+1)*cell)``."""

    origin_x: float
    origin_y: float
    cell_size: float
    elevation: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        elev = np.array(self.elevation, dtype=np.float64)
        if elev.ndim != 2 or 0 in elev.shape:
            raise ValueError("elevation must be a non-empty 2-d grid")
        if not np.isfinite(elev).all():
            raise ValueError("elevation grid contains non-finite values")
        object.__setattr__(self, "elevation", _readonly(elev))

    @property
    def rows(self) -> int:
        return self.elevation.shape[0]

    @property
    def cols(self) -> int:
        return self.elevation.shape[1]

    def cell_index(self, x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest (containing) cell per point, plus an inside-footprint mask.
        The far raster edges are closed so the full extent is queryable."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        c = np.floor((x - self.origin_x) / self.cell_size).astype(np.int64)
        r = np.floor((y - self.origin_y) / self.cell_size).astype(np.int64)
        c = np.where(x == self.origin_x + self.cols * self.cell_size, self.cols - 1, c)
        r = np.where(y == self.origin_y + self.rows * self.cell_size, self.rows - 1, r)
        inside = (c >= 0) & (c < self.cols) & (r >= 0) & (r < self.rows)
        return r, c, inside

    def elevation_at(self, x, y) -> np.ndarray:
        r, c, inside = self.cell_index(x, y)
        if not inside.all():
            bad = np.flatnonzero(~inside)
            raise ValueError(f"{len(bad)} points outside ground raster, first indices {bad[:10].tolist()}")
        return self.elevation[r, c]


# --------------------------------------------------------------------------
# tiles


def write_tile(cloud: PointCloud, path, format: str = "binary") -> None:
    """Write ``cloud`` as a PCT1 binary tile or a CSV file.

    The binary layout is a 13-byte header (``PCT1``, u8 height frame, u64
    little-endian count) followed by 33-byte records of eight float32
    fields and a u8 label, so identical clouds give identical bytes.
    """
    cloud.validate()
    path = Path(path)
    fmt = format.lower()
    if fmt == "binary":
        path.write_bytes(encode_binary(cloud))
    elif fmt == "csv":
        with open(path, "w", newline="\n") as fh:
            fh.write(f"# height_frame={cloud.height_frame.name}\n")
            fh.write(CSV_HEADER + "\n")
            for row, lab in zip(cloud.data.tolist(), cloud.labels.tolist()):
                fh.write(",".join("%.9g" % v for v in row) + f",{lab}\n")
    else:
        raise ValueError(f"unknown tile format {format!r}")


def encode_binary(cloud: PointCloud) -> bytes:
    rec = np.empty(len(cloud), dtype=RECORD_DTYPE)
    rec["f"] = cloud.data
    rec["label"] = cloud.labels
    head = MAGIC + struct.pack("<BQ", int(cloud.height_frame), len(cloud))
    return head + rec.tobytes()


def read_tile(path, format: str = "binary") -> PointCloud:
    path = Path(path)
    fmt = format.lower()
    if fmt == "binary":
        return decode_binary(path.read_bytes())
    if fmt == "csv":
        return _read_csv(path.read_text())
    raise ValueError(f"unknown tile format {format!r}")


def decode_binary(buf: bytes) -> PointCloud:
    if len(buf) < HEADER_SIZE:
        raise LoadError(f"truncated header ({len(buf)} bytes)", offset=len(buf))
    if buf[:4] != MAGIC:
        raise LoadError("bad magic, expected PCT1", offset=0)
    frame, count = struct.unpack_from("<BQ", buf, 4)
    if frame not in (0, 1):
        raise LoadError(f"bad height frame {frame}", offset=4)
    need = HEADER_SIZE + count * RECORD_DTYPE.itemsize
    if len(buf) < need:
        full = (len(buf) - HEADER_SIZE) // RECORD_DTYPE.itemsize
        raise LoadError(f"truncated record {full} of {count}",
                        offset=HEADER_SIZE + full * RECORD_DTYPE.itemsize)
    if len(buf) > need:
        raise LoadError("trailing bytes after last record", offset=need)
    rec = np.frombuffer(buf, dtype=RECORD_DTYPE, count=count, offset=HEADER_SIZE)
    data = rec["f"]
    bad = ~np.isfinite(data)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise LoadError(f"non-finite {FIELDS[j]} in record {i}",
                        offset=HEADER_SIZE + int(i) * RECORD_DTYPE.itemsize + 4 * int(j))
    if count and rec["label"].max() > max(ClassLabel):
        i = int(np.argmax(rec["label"] > max(ClassLabel)))
        raise LoadError(f"unknown label in record {i}",
                        offset=HEADER_SIZE + i * RECORD_DTYPE.itemsize + 32)
    return PointCloud(data, rec["label"], HeightFrame(frame))


def _read_csv(text: str) -> PointCloud:
    lines = text.splitlines()
    frame = HeightFrame.HAS
    start = 0
    if lines and lines[0].startswith("#"):
        key, _, value = lines[0][1:].strip().partition("=")
        if key.strip() != "height_frame" or value.strip() not in HeightFrame.__members__:
            raise LoadError("malformed CSV preamble at line 0", offset=0)
        frame = HeightFrame[value.strip()]
        start = 1
    if len(lines) <= start or lines[start].strip() != CSV_HEADER:
        raise LoadError(f"missing CSV header at line {start}", offset=start)
    rows, labels = [], []
    for lineno in range(start + 1, len(lines)):
        line = lines[lineno]
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 9:
            raise LoadError(f"expected 9 fields at line {lineno}", offset=lineno)
        try:
            vals = [float(p) for p in parts[:8]]
            lab = int(parts[8])
        except ValueError as exc:
            raise LoadError(f"unparseable value at line {lineno}: {exc}", offset=lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise LoadError(f"non-finite field at line {lineno}", offset=lineno)
        if lab not in ClassLabel._value2member_map_:
            raise LoadError(f"unknown label at line {lineno}", offset=lineno)
        rows.append(vals)
        labels.append(lab)
    return PointCloud(np.array(rows, dtype=np.float32).reshape(-1, 8), labels, frame)


# --------------------------------------------------------------------------
# ground rasters

_GROUND_KEYS = ("origin_x", "origin_y", "cell_size", "rows", "cols")


def write_ground(ground: GroundModel, path) -> None:
    buf = io.StringIO()
    for key in _GROUND_KEYS:
        buf.write(f"{key},{getattr(ground, key)!r}\n")
    for row in ground.elevation.tolist():
        buf.write(",".join(repr(v) for v in row) + "\n")
    Path(path).write_text(buf.getvalue())


def read_ground(path) -> GroundModel:
    lines = Path(path).read_text().splitlines()
    head = {}
    for i, key in enumerate(_GROUND_KEYS):
        if i >= len(lines) or not lines[i].startswith(key + ","):
            raise LoadError(f"ground header line {i} should be {key}", offset=i)
        head[key] = lines[i].split(",", 1)[1]
    try:
        rows, cols = int(head["rows"]), int(head["cols"])
        elev = np.array([[float(v) for v in ln.split(",")] for ln in lines[5:5 + rows]])
    except ValueError as exc:
        raise LoadError(f"malformed ground raster: {exc}") from None
    if elev.shape != (rows, cols):
        raise LoadError(f"ground grid is {elev.shape}, header says {(rows, cols)}")
    return GroundModel(float(head["origin_x"]), float(head["origin_y"]),
                       float(head["cell_size"]), elev)


# --------------------------------------------------------------------------


def split_blocks_train_test(block_ids_with_towers, block_ids_all, holdout_fraction: float = 0.1,
                            seed: int = 0) -> tuple[set, set]:
    """Hold out ``ceil(fraction * |tower blocks|)`` tower blocks for testing."""
    towers, everything = set(block_ids_with_towers), set(block_ids_all)
    if not 0 < holdout_fraction < 1:
        raise ValueError("holdout_fraction must lie in (0, 1)")
    if not towers:
        raise ValueError("no tower blocks, cannot form a test split")
    if not towers <= everything:
        raise ValueError("tower blocks must be a subset of all blocks")
    order = sorted(towers, key=str)
    random.Random(seed).shuffle(order)
    # guard against 0.1 * 30 == 3.0000000000000004
    n_test = math.ceil(holdout_fraction * len(order) - 1e-9)
    test = set(order[:n_test])
    return everything - test, test
