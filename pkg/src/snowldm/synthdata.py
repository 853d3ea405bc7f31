"""Ray-cast synthetic driving scenes and per-ray snow clutter.

Scenes are built from a ground plane, axis-aligned boxes and vertical wall
segments, all with analytic ray intersections.  Every (row, column) of the
sensor fires one ray at the bin-center angles, so a generated cloud projects
without collisions.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .range_codec import PointCloud, SensorConfig, pixel_indices, project, write_lpc, write_rimg

MIN_SNOW_RANGE = 0.5


@dataclass
class Box:
    center: tuple[float, float, float]
    extents: tuple[float, float, float]   # full side lengths


@dataclass
class Wall:
    start: tuple[float, float]
    end: tuple[float, float]
    height: float


@dataclass
class SceneSpec:
    seed: int = 0
    sensor_height: float = 1.8
    boxes: list[Box] = field(default_factory=list)
    walls: list[Wall] = field(default_factory=list)


@dataclass
class SnowSpec:
    rate: float = 0.08
    near_bias: float = 0.25
    occlusion: bool = True

    def __post_init__(self) -> None:
        if self.rate < 0:
            raise ValueError(f"snow rate must be >= 0, got {self.rate}")
        if not self.near_bias > 0:
            raise ValueError(f"near_bias must be > 0, got {self.near_bias}")


def sample_scene(rng: np.random.Generator, seed: int = 0, r_max: float = 120.0) -> SceneSpec:
    """Random street-like layout: parked boxes and a few building walls."""
    h = 1.8
    boxes = []
    for _ in range(int(rng.integers(4, 11))):
        dist = rng.uniform(4.0, min(35.0, 0.8 * r_max))
        az = rng.uniform(-math.pi, math.pi)
        size = (rng.uniform(1.5, 5.0), rng.uniform(1.5, 2.5), rng.uniform(1.0, 3.0))
        cx, cy = dist * math.cos(az), dist * math.sin(az)
        if math.hypot(cx, cy) - max(size[:2]) < 2.0:
            continue
        boxes.append(Box((cx, cy, -h + size[2] / 2), size))
    walls = []
    for _ in range(int(rng.integers(0, 3))):
        dist = rng.uniform(12.0, min(40.0, 0.9 * r_max))
        az = rng.uniform(-math.pi, math.pi)
        half = rng.uniform(5.0, 15.0)
        cx, cy = dist * math.cos(az), dist * math.sin(az)
        tx, ty = -math.sin(az), math.cos(az)
        walls.append(Wall((cx - half * tx, cy - half * ty), (cx + half * tx, cy + half * ty),
                          rng.uniform(2.0, 6.0)))
    return SceneSpec(seed=seed, sensor_height=h, boxes=boxes, walls=walls)


def ray_directions(cfg: SensorConfig) -> np.ndarray:
    """Unit direction per pixel, shape (H, W, 3)."""
    phi = cfg.row_elevations()[:, None]
    theta = cfg.col_azimuths()[None, :]
    return np.stack(np.broadcast_arrays(np.cos(phi) * np.cos(theta),
                                        np.cos(phi) * np.sin(theta),
                                        np.sin(phi)), axis=-1)


def _hit_ground(d: np.ndarray, height: float) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(d[..., 2] < 0, -height / d[..., 2], np.inf)
    return t


def _hit_box(d: np.ndarray, box: Box) -> np.ndarray:
    c = np.asarray(box.center)
    half = np.asarray(box.extents) / 2
    lo, hi = c - half, c + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1, t2 = lo * inv, hi * inv
    # zero direction components: inside the slab means unbounded, else no hit
    t1 = np.where(d == 0, np.where((lo <= 0) & (0 <= hi), -np.inf, np.inf), t1)
    t2 = np.where(d == 0, np.where((lo <= 0) & (0 <= hi), np.inf, -np.inf), t2)
    tmin = np.minimum(t1, t2).max(axis=-1)
    tmax = np.maximum(t1, t2).min(axis=-1)
    ok = (tmax >= tmin) & (tmin > 0)
    return np.where(ok, tmin, np.inf)


def _hit_wall(d: np.ndarray, wall: Wall, height: float) -> np.ndarray:
    p0 = np.asarray(wall.start, dtype=np.float64)
    seg = np.asarray(wall.end, dtype=np.float64) - p0
    normal = np.array([-seg[1], seg[0]])
    denom = d[..., 0] * normal[0] + d[..., 1] * normal[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (p0 @ normal) / denom
    hx, hy, hz = t * d[..., 0], t * d[..., 1], t * d[..., 2]
    s = ((hx - p0[0]) * seg[0] + (hy - p0[1]) * seg[1]) / (seg @ seg)
    ok = (denom != 0) & (t > 0) & (s >= 0) & (s <= 1) & (hz >= -height) & (hz <= -height + wall.height)
    return np.where(ok, t, np.inf)


def cast_ranges(spec: SceneSpec, cfg: SensorConfig) -> np.ndarray:
    """Nearest hit distance per pixel, inf where nothing is hit within r_max."""
    d = ray_directions(cfg)
    t = _hit_ground(d, spec.sensor_height)
    for box in spec.boxes:
        t = np.minimum(t, _hit_box(d, box))
    for wall in spec.walls:
        t = np.minimum(t, _hit_wall(d, wall, spec.sensor_height))
    return np.where(t <= cfg.r_max, t, np.inf)


def gen_clear(spec: SceneSpec, cfg: SensorConfig) -> PointCloud:
    t = cast_ranges(spec, cfg)
    rows, cols = np.nonzero(np.isfinite(t))
    d = ray_directions(cfg)[rows, cols]
    return PointCloud(d * t[rows, cols, None], rows, snow=np.zeros(rows.size, dtype=bool))


def sample_truncated_exponential(rng: np.random.Generator, rate: float, lo, hi, size=None) -> np.ndarray:
    """Inverse-CDF draw from Exp(rate) restricted to (lo, hi); ``hi`` may be inf."""
    u = rng.random(size)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    span = np.expm1(-rate * (hi - lo))
    return lo - np.log1p(u * span) / rate


def add_snow(cloud: PointCloud, spec: SnowSpec, cfg: SensorConfig, rng: np.random.Generator) -> PointCloud:
    """Per-ray snow returns nearer than the surface (or r_max on empty rays)."""
    surface = np.full((cfg.H, cfg.W), np.inf)
    owner = np.full((cfg.H, cfg.W), -1, dtype=np.int64)
    if len(cloud):
        rows, cols = pixel_indices(cloud, cfg)
        surface[rows, cols] = cloud.ranges
        owner[rows, cols] = np.arange(len(cloud))
    flakes = rng.random((cfg.H, cfg.W)) < min(1.0, spec.rate)
    far = np.minimum(surface, cfg.r_max)
    r_s = sample_truncated_exponential(rng, spec.near_bias, MIN_SNOW_RANGE, far)
    r_s = np.minimum(r_s, far * (1 - 1e-6))
    flakes &= far > MIN_SNOW_RANGE
    fr, fc = np.nonzero(flakes)
    d = ray_directions(cfg)[fr, fc]
    snow_pts = d * r_s[fr, fc, None]
    keep = np.ones(len(cloud), dtype=bool)
    if spec.occlusion:
        replaced = owner[fr, fc]
        keep[replaced[replaced >= 0]] = False
    old_flags = cloud.snow if cloud.snow is not None else np.zeros(len(cloud), dtype=bool)
    pts = np.concatenate([cloud.points[keep], snow_pts])
    beam = np.concatenate([cloud.beam[keep], fr])
    flags = np.concatenate([old_flags[keep], np.ones(fr.size, dtype=bool)])
    return PointCloud(pts, beam, snow=flags)


def near_field_count(depth_m: np.ndarray, valid: np.ndarray, limit: float = 10.0) -> int:
    return int(np.count_nonzero(valid & (depth_m < limit)))


def _make_scene(args):
    idx, seed, cfg, snow_spec = args
    rng = np.random.default_rng(seed + idx)
    spec = sample_scene(rng, seed=seed + idx, r_max=cfg.r_max)
    clear = gen_clear(spec, cfg)
    snowy = add_snow(clear, snow_spec, cfg, rng)
    return idx, clear, snowy


def gen_dataset(out_dir: str | Path, n_scenes: int, cfg: SensorConfig, snow_spec: SnowSpec | None = None,
                seed: int = 0, jobs: int = 1) -> list[tuple[Path, Path, Path, Path]]:
    """Write paired scenes plus a ``dataset.txt`` manifest; returns the file tuples.

    Manifest lines: ``clear.rimg<TAB>snow.rimg<TAB>clear.lpc<TAB>snow.lpc``.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    snow_spec = snow_spec or SnowSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    work = [(i, seed, cfg, snow_spec) for i in range(n_scenes)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            scenes = list(pool.map(_make_scene, work))
    else:
        scenes = [_make_scene(w) for w in work]
    rows = []
    for idx, clear, snowy in scenes:
        names = (f"scene_{idx:04d}_clear.rimg", f"scene_{idx:04d}_snow.rimg",
                 f"scene_{idx:04d}_clear.lpc", f"scene_{idx:04d}_snow.lpc")
        paths = tuple(out / n for n in names)
        try:
            write_rimg(paths[0], project(clear, cfg))
            write_rimg(paths[1], project(snowy, cfg))
            write_lpc(paths[2], clear)
            write_lpc(paths[3], snowy)
        except OSError as exc:
            raise OSError(f"cannot write scene {idx} under {out}: {exc}") from exc
        rows.append(paths)
    (out / "dataset.txt").write_text("".join("\t".join(n.name for n in r) + "\n" for r in rows))
    return rows


def read_manifest(root: str | Path) -> list[tuple[Path, Path, Path, Path]]:
    root = Path(root)
    manifest = root / "dataset.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no dataset.txt in {root}")
    out = []
    for line in manifest.read_text().splitlines():
        if line.strip():
            out.append(tuple(root / part for part in line.split("\t")))
    return out
