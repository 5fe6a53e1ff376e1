"""Procedural labelled scenes: terrain, stratified vegetation, lattice
towers and catenary power lines.

Object points are placed at an exact height above the nearest ground
cell, so ``compute_hag`` recovers the generated heights and ground returns
clamp to zero.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cloud_model import (ClassLabel, GroundModel, HeightFrame, PointCloud, split_blocks_train_test,
                          write_ground, write_tile)

# mean radiometry (intensity, red, green, blue, nir) per material
_VEGETATION = (0.30, 0.10, 0.32, 0.12, 0.62)
_SOIL = (0.42, 0.36, 0.32, 0.26, 0.40)
_METAL = (0.62, 0.48, 0.48, 0.50, 0.44)
_RADIOMETRY_SD = 0.05

CELL = 40.0  # towers are kept inside cells of the default 40 m tiling grid


@dataclass(frozen=True)
class SceneConfig:
    """Scene parameters.

    The vegetation fractions are shares of the total point budget; ground
    takes what remains after vegetation, towers and lines. With
    ``color_signal`` off every class shares one radiometric distribution.
    """

    extent: tuple[float, float] = (320.0, 320.0)
    point_density: float = 8.0
    tower_count: int = 3
    tower_height_range: tuple[float, float] = (10.0, 50.0)
    tower_width_max: float = 20.0
    tower_points_range: tuple[int, int] = (20, 2434)
    veg_low_fraction: float = 0.12
    veg_mid_fraction: float = 0.30
    veg_high_fraction: float = 0.06
    veg_high_top: float = 25.0
    ground_cell: float = 2.0
    color_signal: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "extent", tuple(float(v) for v in self.extent))
        fr = (self.veg_low_fraction, self.veg_mid_fraction, self.veg_high_fraction)
        if min(fr) < 0 or sum(fr) > 1:
            raise ValueError("vegetation fractions must be >= 0 and sum to at most 1")
        lo, hi = self.tower_height_range
        if not 0 < lo <= hi:
            raise ValueError("tower_height_range must be ordered and positive")
        plo, phi = self.tower_points_range
        if not 1 <= plo <= phi:
            raise ValueError("tower_points_range must be ordered and positive")
        if self.tower_count < 0 or self.point_density <= 0 or min(self.extent) <= 0:
            raise ValueError("counts, density and extent must be positive")
        if not 0 < self.tower_width_max <= CELL / 2:
            raise ValueError(f"tower_width_max must lie in (0, {CELL / 2}]")


@dataclass(frozen=True)
class TowerSpec:
    """Ground-truth tower geometry; every tower point lies inside the
    cylinder of ``radius`` around (x, y) up to ``height``."""

    x: float
    y: float
    height: float
    base_width: float
    span: float
    heading: float
    n_points: int
    arm_heights: tuple[float, float] = field(default=(0.0, 0.0))

    @property
    def radius(self) -> float:
        return max(self.span / 2, self.base_width / math.sqrt(2)) + 0.5


@dataclass
class Scene:
    cloud: PointCloud
    ground: GroundModel
    towers: list[TowerSpec]


# --------------------------------------------------------------------------
# pieces


def _terrain(cfg: SceneConfig, rng) -> GroundModel:
    ex, ey = cfg.extent
    cols = int(math.ceil(ex / cfg.ground_cell))
    rows = int(math.ceil(ey / cfg.ground_cell))
    xs = (np.arange(cols) + 0.5) * cfg.ground_cell
    ys = (np.arange(rows) + 0.5) * cfg.ground_cell
    gx, gy = np.meshgrid(xs, ys)
    elev = np.full(gx.shape, rng.uniform(100, 400))
    for _ in range(4):
        wavelength = rng.uniform(150, 600)
        angle = rng.uniform(0, 2 * math.pi)
        phase = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(1, 8)
        proj = gx * math.cos(angle) + gy * math.sin(angle)
        elev += amp * np.sin(2 * math.pi * proj / wavelength + phase)
    return GroundModel(0.0, 0.0, cfg.ground_cell, elev)


def _radiometry(material, n, color_signal: bool, rng) -> np.ndarray:
    mean = np.asarray(material if color_signal else _SOIL)
    return np.clip(mean + rng.normal(0, _RADIOMETRY_SD, size=(n, 5)), 0.0, 1.0)


def _uniform_xy(n, extent, rng):
    return rng.uniform(0, 1, size=(n, 2)) * np.asarray(extent)


def _vegetation(n, extent, z_lo, z_hi, crown_radius, per_cluster, rng):
    """Clustered canopy points with heights in ``[z_lo, z_hi)``."""
    if n == 0:
        return np.zeros((0, 3))
    k = max(1, n // per_cluster)
    centers = _uniform_xy(k, extent, rng)
    tops = rng.uniform(z_lo + 0.6 * (z_hi - z_lo), z_hi, size=k)
    radii = rng.uniform(0.5, 1.0, size=k) * crown_radius
    member = rng.integers(0, k, size=n)
    xy = centers[member] + rng.normal(0, 1, size=(n, 2)) * radii[member, None] / 2
    xy = np.mod(xy, np.asarray(extent))
    z = z_lo + rng.uniform(0, 1, size=n) ** 0.7 * (tops[member] - z_lo)
    return np.column_stack([xy, np.minimum(z, np.nextafter(z_hi, z_lo))])


def _tower_segments(h, w, span, arm_heights):
    """Lattice segments in local coordinates (x along the arms)."""
    top = 0.3 * w
    b, t = w / 2, top / 2
    corners = [(-1, -1), (1, -1), (1, 1), (-1, 1)]
    segs = []
    for sx, sy in corners:
        segs.append(((sx * b, sy * b, 0.0), (sx * t, sy * t, h * 0.95)))
    levels = np.linspace(0, 0.95 * h, 6)
    for z0, z1 in zip(levels[:-1], levels[1:]):
        f0 = b + (t - b) * z0 / (0.95 * h)
        f1 = b + (t - b) * z1 / (0.95 * h)
        for i in range(4):
            (ax, ay), (bx, by) = corners[i], corners[(i + 1) % 4]
            segs.append(((ax * f0, ay * f0, z0), (bx * f1, by * f1, z1)))
            segs.append(((bx * f0, by * f0, z0), (ax * f1, ay * f1, z1)))
    for za in arm_heights:
        segs.append(((-span / 2, 0.0, za), (span / 2, 0.0, za)))
    segs.append(((0.0, 0.0, 0.95 * h), (0.0, 0.0, h)))
    return np.asarray(segs, dtype=np.float64)


def _sample_segments(segs, n, rng, noise=0.08):
    lengths = np.linalg.norm(segs[:, 1] - segs[:, 0], axis=1)
    pick = rng.choice(len(segs), size=n, p=lengths / lengths.sum())
    t = rng.uniform(0, 1, size=(n, 1))
    pts = segs[pick, 0] + t * (segs[pick, 1] - segs[pick, 0])
    return pts + rng.normal(0, noise, size=pts.shape)


def _tower_points(spec: TowerSpec, rng) -> np.ndarray:
    segs = _tower_segments(spec.height, spec.base_width, spec.span, spec.arm_heights)
    local = _sample_segments(segs, spec.n_points, rng)
    c, s = math.cos(spec.heading), math.sin(spec.heading)
    x = spec.x + c * local[:, 0] - s * local[:, 1]
    y = spec.y + s * local[:, 0] + c * local[:, 1]
    z = np.clip(local[:, 2], 0.05, spec.height)
    return np.column_stack([x, y, z])


def _arm_tips(spec: TowerSpec):
    c, s = math.cos(spec.heading), math.sin(spec.heading)
    tips = []
    for za in spec.arm_heights:
        for side in (-1, 1):
            d = side * spec.span / 2
            tips.append((spec.x + c * d, spec.y + s * d, za))
    return tips


def _wire_pairs(tips_a, tips_b):
    """Connect arm tips level by level without crossing the wires."""
    pairs = []
    for k in range(0, len(tips_a), 2):
        a0, a1 = tips_a[k:k + 2]
        b0, b1 = tips_b[k:k + 2]
        straight = math.dist(a0, b0) + math.dist(a1, b1)
        crossed = math.dist(a0, b1) + math.dist(a1, b0)
        pairs += [(a0, b0), (a1, b1)] if straight <= crossed else [(a0, b1), (a1, b0)]
    return pairs


def _catenary(p0, p1, spacing, rng, sag_ratio=0.03):
    p0, p1 = np.asarray(p0), np.asarray(p1)
    length = float(np.hypot(*(p1[:2] - p0[:2])))
    n = max(2, int(length / spacing))
    t = np.sort(rng.uniform(0, 1, size=n))
    sag = sag_ratio * length
    # catenary a*cosh(u/a) through both ends with mid-span sag ``sag``
    a = length**2 / (8 * sag) if sag > 0 else 1e9
    u = (t - 0.5) * length
    droop = a * (np.cosh(u / a) - np.cosh(length / (2 * a)))
    pts = p0 + t[:, None] * (p1 - p0)
    pts[:, 2] += droop
    return pts


def _clear_of_wires(xyz, specs, clearance=3.0, sag_ratio=0.03):
    """Mask of points outside every span's managed corridor.

    Utilities keep vegetation below the lowest wire; within ``clearance`` of the
    corridor edge, points higher than the wire minus ``clearance`` are removed.
    """
    keep = np.ones(len(xyz), dtype=bool)
    for a, b in zip(specs[:-1], specs[1:]):
        p0, p1 = np.array([a.x, a.y]), np.array([b.x, b.y])
        d = p1 - p0
        length = float(np.hypot(*d))
        if length == 0:
            continue
        t = np.clip((xyz[:, :2] - p0) @ d / length**2, 0.0, 1.0)
        off = np.hypot(*(xyz[:, :2] - (p0 + t[:, None] * d)).T)
        # lowest wire: linear between the lower arms minus a parabolic sag
        wire = (1 - t) * min(a.arm_heights) + t * min(b.arm_heights) - 4 * sag_ratio * length * t * (1 - t)
        half = max(a.span, b.span) / 2 + clearance
        keep &= ~((off <= half) & (xyz[:, 2] > wire - clearance))
    return keep


def _place_towers(cfg: SceneConfig, rng) -> list[tuple[float, float]]:
    """Tower centres inside distinct 40 m cells, at least 40 m apart."""
    ex, ey = cfg.extent
    nx, ny = int(ex // CELL), int(ey // CELL)
    margin = cfg.tower_width_max / math.sqrt(2) + 1.0
    if cfg.tower_count > nx * ny:
        raise ValueError(f"cannot place {cfg.tower_count} towers in a {ex}x{ey} m extent")
    cells = rng.permutation(nx * ny)
    placed: list[tuple[float, float]] = []
    for cell in cells:
        if len(placed) == cfg.tower_count:
            break
        cy, cx = divmod(int(cell), nx)
        for _ in range(20):
            x = cx * CELL + rng.uniform(margin, CELL - margin)
            y = cy * CELL + rng.uniform(margin, CELL - margin)
            if all(math.hypot(x - px, y - py) >= CELL for px, py in placed):
                placed.append((x, y))
                break
    if len(placed) < cfg.tower_count:
        raise ValueError(f"infeasible placement: only {len(placed)} of {cfg.tower_count} towers fit "
                         "with 40 m separation")
    # order along a greedy path so consecutive towers make a plausible line
    if placed:
        path = [placed.pop(0)]
        while placed:
            last = path[-1]
            j = min(range(len(placed)), key=lambda i: math.hypot(placed[i][0] - last[0],
                                                                 placed[i][1] - last[1]))
            path.append(placed.pop(j))
        placed = path
    return placed


# --------------------------------------------------------------------------


def generate_scene(cfg: SceneConfig) -> Scene:
    """Build one labelled HAS scene and its ground raster, deterministic per seed."""
    rng = np.random.default_rng(cfg.seed)
    ground = _terrain(cfg, rng)
    ex, ey = cfg.extent
    total = int(round(cfg.point_density * ex * ey))

    centers = _place_towers(cfg, rng)
    lo_h, hi_h = cfg.tower_height_range
    lo_p, hi_p = cfg.tower_points_range
    specs = []
    # towers on one line share a nominal height, so the wires stay level across spans
    nominal = float(rng.uniform(lo_h, hi_h))
    for i, (x, y) in enumerate(centers):
        h = float(np.clip(nominal * rng.uniform(0.9, 1.1), lo_h, hi_h))
        w = float(np.clip(rng.uniform(0.15, 0.3) * h, 2.0, cfg.tower_width_max * 0.6))
        span = float(np.clip(rng.uniform(0.8, 1.2) * (w + 6), w, cfg.tower_width_max))
        if i + 1 < len(centers):
            nxt = centers[i + 1]
        elif i > 0:
            nxt = centers[i - 1]
        else:
            nxt = (x + 1.0, y)
        heading = math.atan2(nxt[1] - y, nxt[0] - x) + math.pi / 2
        # a nadir scanner sees the lattice from above: returns scale with the footprint,
        # giving few points for most towers and a long tail for wide ones
        n = int(np.clip(round(cfg.point_density * w * w * rng.lognormal(0, 0.5)), lo_p, hi_p))
        arms = (round(0.75 * h, 3), round(0.9 * h, 3))
        specs.append(TowerSpec(x, y, h, w, span, heading, n, arms))

    parts, labels, materials = [], [], []

    def add(xyz, label, material):
        parts.append(xyz)
        labels.append(np.full(len(xyz), label, dtype=np.uint8))
        materials.append((material, len(xyz)))

    for spec in specs:
        add(_tower_points(spec, rng), ClassLabel.TOWER, _METAL)
    for a, b in zip(specs[:-1], specs[1:]):
        for p0, p1 in _wire_pairs(_arm_tips(a), _arm_tips(b)):
            add(_catenary(p0, p1, spacing=0.7, rng=rng), ClassLabel.POWER_LINE, _METAL)

    extent = (ex, ey)
    strata = [(cfg.veg_low_fraction, 0.2, 3.0, 2.5, 40),
              (cfg.veg_mid_fraction, 3.0, 8.0, 4.0, 120),
              (cfg.veg_high_fraction, 8.0, cfg.veg_high_top, 6.0, 300)]
    for frac, z_lo, z_hi, radius, per in strata:
        veg = _vegetation(int(round(frac * total)), extent, z_lo, z_hi, radius, per, rng)
        add(veg[_clear_of_wires(veg, specs)], ClassLabel.BACKGROUND, _VEGETATION)

    n_ground = max(0, total - sum(len(p) for p in parts))
    gxy = _uniform_xy(n_ground, extent, rng)
    add(np.column_stack([gxy, -rng.uniform(0.01, 0.05, size=n_ground)]), ClassLabel.GROUND, _SOIL)

    xyz = np.concatenate(parts)
    xyz[:, 0] = np.clip(xyz[:, 0], 0.0, ex)
    xyz[:, 1] = np.clip(xyz[:, 1], 0.0, ey)
    xyz[:, 2] += ground.elevation_at(xyz[:, 0], xyz[:, 1])
    rad = np.concatenate([_radiometry(m, n, cfg.color_signal, rng) for m, n in materials])
    lab = np.concatenate(labels)

    # shuffle so file order carries no class information
    order = rng.permutation(len(xyz))
    data = np.column_stack([xyz, rad])[order].astype(np.float32)
    cloud = PointCloud(data, lab[order], HeightFrame.HAS, (0.0, 0.0, ex, ey))
    return Scene(cloud, ground, specs)


# --------------------------------------------------------------------------
# corpus

CORPUS_INDEX = "blocks.csv"


def windows_per_scene(cfg: SceneConfig, side: float = CELL) -> int:
    ex, ey = cfg.extent
    return int(math.ceil(ex / side)) * int(math.ceil(ey / side))


def tower_allocation(cfg: SceneConfig, n_scenes: int, prevalence: float | None) -> list[int]:
    """Towers per scene. With ``prevalence`` the corpus-wide count is the
    fraction of tiling windows that should hold a tower (each tower sits
    inside one window)."""
    if prevalence is None:
        return [cfg.tower_count] * n_scenes
    if not 0 < prevalence < 1:
        raise ValueError("prevalence must lie in (0, 1)")
    # at least three tower blocks so train, validation and test each get one
    total = max(min(3, n_scenes), int(round(prevalence * windows_per_scene(cfg) * n_scenes)))
    base, extra = divmod(total, n_scenes)
    return [base + (1 if i < extra else 0) for i in range(n_scenes)]


def generate_corpus(cfg: SceneConfig, n_scenes: int, seed: int, out_dir,
                    prevalence: float | None = None, test_fraction: float = 0.1,
                    val_fraction: float = 0.1, threads: int = 1) -> Path:
    """Write ``n_scenes`` blocks as PCT1 tiles plus ground rasters.

    ``blocks.csv`` lists ``block_id,split,towers,points``. Test blocks are
    drawn from tower-bearing blocks, validation blocks likewise from the
    remaining ones; fractions that would leave the training split without
    a tower-bearing block are rejected.
    """
    if n_scenes < 3:
        raise ValueError("a corpus needs at least 3 scenes (train, validation and test)")
    counts = tower_allocation(cfg, n_scenes, prevalence)
    scene_seeds = np.random.SeedSequence(seed).generate_state(n_scenes)
    ids = [f"b{i:03d}" for i in range(n_scenes)]

    towered = {bid for bid, n in zip(ids, counts) if n > 0}
    everything = set(ids)
    if len(towered) < 2:
        raise ValueError("need at least two tower-bearing blocks to form test and validation splits")
    rest, test = split_blocks_train_test(towered, everything, test_fraction, seed)
    if len(towered & rest) < 2:
        raise ValueError("test_fraction leaves fewer than two tower blocks for training and validation")
    train, val = split_blocks_train_test(towered & rest, rest, val_fraction, seed + 1)
    if not towered & train:
        raise ValueError("val_fraction leaves no tower block for training")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def one(job):
        bid, n_towers, s = job
        scene = generate_scene(replace(cfg, tower_count=n_towers, seed=int(s)))
        write_tile(scene.cloud, out / f"{bid}.pct")
        write_ground(scene.ground, out / f"{bid}.ground.csv")
        return bid, n_towers, len(scene.cloud)

    # scenes are independent and seeded individually, so worker order is irrelevant
    with ThreadPoolExecutor(max_workers=threads) as pool:
        rows = list(pool.map(one, zip(ids, counts, scene_seeds)))

    with open(out / CORPUS_INDEX, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block_id", "split", "towers", "points"])
        for bid, n, npts in rows:
            split = "test" if bid in test else "val" if bid in val else "train"
            w.writerow([bid, split, n, npts])
    return out / CORPUS_INDEX


def read_corpus_index(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / CORPUS_INDEX
    with open(path, newline="") as fh:
        return [dict(r, towers=int(r["towers"]), points=int(r["points"])) for r in csv.DictReader(fh)]
