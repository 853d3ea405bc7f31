"""Point cloud <-> normalized-depth range image codec and file formats.

Rows are indexed by laser channel (``mode="beam"``) or by equal elevation
bins (``mode="uniform"``); columns split the azimuth into equal bins.  Each
pixel stores ``d = 2 r / r_max - 1`` clamped to [-1, 1]; -1 doubles as the
"no return" sentinel.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SENTINEL = -1.0
SENTINEL_EPS = 1e-6


class CodecError(ValueError):
    pass


def default_beam_elevations(n_beams: int, lo_deg: float = -25.0, hi_deg: float = 15.0) -> np.ndarray:
    """Linearly spaced elevation table in radians, beam 0 lowest."""
    if n_beams == 1:
        return np.array([math.radians((lo_deg + hi_deg) / 2)])
    return np.radians(np.linspace(lo_deg, hi_deg, n_beams))


@dataclass
class SensorConfig:
    H: int = 128
    W: int = 1024
    r_max: float = 120.0
    mode: str = "beam"
    phi_min: float = math.radians(-25.0)
    phi_max: float = math.radians(15.0)
    beam_elevations: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.H < 1 or self.W < 1:
            raise CodecError(f"image size must be positive, got {self.H}x{self.W}")
        if not self.r_max > 0:
            raise CodecError(f"r_max must be positive, got {self.r_max}")
        if self.mode not in ("beam", "uniform"):
            raise CodecError(f"mode must be 'beam' or 'uniform', got {self.mode!r}")
        if self.mode == "uniform" and not self.phi_min < self.phi_max:
            raise CodecError("uniform mode needs phi_min < phi_max")
        if self.beam_elevations is not None:
            be = np.asarray(self.beam_elevations, dtype=np.float64)
            if be.shape != (self.H,):
                raise CodecError(f"beam_elevations needs {self.H} entries, got {be.shape}")
            step = np.diff(be)
            if be.size > 1 and not (np.all(step > 0) or np.all(step < 0)):
                raise CodecError("beam_elevations must be strictly monotonic")
            self.beam_elevations = be

    @classmethod
    def toy(cls, **overrides) -> "SensorConfig":
        """32x64 beam-mode sensor with a 40 m range and the default elevation table."""
        kw = dict(H=32, W=64, r_max=40.0)
        kw.update(overrides)
        if kw.get("mode", "beam") == "beam" and kw.get("beam_elevations") is None:
            kw["beam_elevations"] = default_beam_elevations(kw["H"])
        return cls(**kw)

    def row_elevations(self) -> np.ndarray:
        """Elevation (radians) assigned to each image row on unprojection."""
        if self.mode == "beam":
            if self.beam_elevations is None:
                raise CodecError("beam mode unprojection needs beam_elevations")
            return self.beam_elevations
        span = self.phi_max - self.phi_min
        return self.phi_min + (np.arange(self.H) + 0.5) / self.H * span

    def col_azimuths(self) -> np.ndarray:
        return (np.arange(self.W) + 0.5) * (2 * math.pi / self.W) - math.pi


@dataclass
class PointCloud:
    points: np.ndarray
    beam: np.ndarray
    snow: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.beam = np.asarray(self.beam, dtype=np.int64).reshape(-1)
        if self.beam.shape[0] != self.points.shape[0]:
            raise CodecError(f"{self.points.shape[0]} points but {self.beam.shape[0]} beam ids")
        if self.snow is not None:
            self.snow = np.asarray(self.snow, dtype=bool).reshape(-1)

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    @property
    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=1)

    def validate(self, n_beams: int | None = None) -> None:
        if not np.all(np.isfinite(self.points)):
            raise CodecError("point cloud holds non-finite coordinates")
        if len(self) and not np.all(self.ranges > 0):
            raise CodecError("point at the sensor origin (range 0)")
        if len(self) and self.beam.min() < 0:
            raise CodecError("negative beam id")
        if n_beams is not None and len(self) and self.beam.max() >= n_beams:
            raise CodecError(f"beam id {self.beam.max()} >= {n_beams}")


@dataclass
class RangeImage:
    depth: np.ndarray
    r_max: float

    def __post_init__(self) -> None:
        self.depth = np.asarray(self.depth, dtype=np.float32)
        if self.depth.ndim != 2:
            raise CodecError(f"range image must be 2-D, got shape {self.depth.shape}")
        if np.any(self.depth < -1) or np.any(self.depth > 1) or not np.all(np.isfinite(self.depth)):
            raise CodecError("range image values must lie in [-1, 1]")

    @property
    def H(self) -> int:
        return self.depth.shape[0]

    @property
    def W(self) -> int:
        return self.depth.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.depth > SENTINEL + SENTINEL_EPS

    @classmethod
    def blank(cls, H: int, W: int, r_max: float) -> "RangeImage":
        return cls(np.full((H, W), SENTINEL, dtype=np.float32), r_max)


def pixel_indices(cloud: PointCloud, cfg: SensorConfig) -> tuple[np.ndarray, np.ndarray]:
    """(row, col) bin of every point."""
    p = cloud.points
    theta = np.arctan2(p[:, 1], p[:, 0])
    col = np.floor((theta + math.pi) / (2 * math.pi) * cfg.W).astype(np.int64) % cfg.W
    if cfg.mode == "beam":
        if len(cloud) and cloud.beam.max() >= cfg.H:
            raise CodecError(f"beam id {int(cloud.beam.max())} does not fit {cfg.H} rows")
        row = cloud.beam.copy()
    else:
        r = np.linalg.norm(p, axis=1)
        phi = np.arcsin(np.clip(p[:, 2] / r, -1.0, 1.0))
        frac = (phi - cfg.phi_min) / (cfg.phi_max - cfg.phi_min)
        row = np.clip(np.floor(frac * cfg.H), 0, cfg.H - 1).astype(np.int64)
    return row, col


def project(cloud: PointCloud, cfg: SensorConfig) -> RangeImage:
    """Range image of ``cloud``; on collisions the nearest point wins (first seen on ties)."""
    img = np.full((cfg.H, cfg.W), SENTINEL, dtype=np.float32)
    if len(cloud) == 0:
        return RangeImage(img, cfg.r_max)
    cloud.validate(cfg.H if cfg.mode == "beam" else None)
    row, col = pixel_indices(cloud, cfg)
    r = cloud.ranges
    order = np.argsort(r, kind="stable")
    flat = row[order] * cfg.W + col[order]
    _, first = np.unique(flat, return_index=True)
    keep = order[first]
    d = np.clip(2.0 * r[keep] / cfg.r_max - 1.0, -1.0, 1.0)
    img[row[keep], col[keep]] = d
    return RangeImage(img, cfg.r_max)


def unproject(img: RangeImage, cfg: SensorConfig) -> PointCloud:
    """One point per valid pixel at the pixel-center azimuth and row elevation."""
    if (img.H, img.W) != (cfg.H, cfg.W):
        raise CodecError(f"image is {img.H}x{img.W} but sensor is {cfg.H}x{cfg.W}")
    elev = cfg.row_elevations()
    rows, cols = np.nonzero(img.valid)
    if rows.size == 0:
        return PointCloud.empty()
    r = (img.depth[rows, cols].astype(np.float64) + 1.0) / 2.0 * img.r_max
    phi = elev[rows]
    theta = cfg.col_azimuths()[cols]
    pts = np.stack([r * np.cos(phi) * np.cos(theta),
                    r * np.cos(phi) * np.sin(theta),
                    r * np.sin(phi)], axis=1)
    return PointCloud(pts, rows)


def depth_of(img: RangeImage) -> tuple[np.ndarray, np.ndarray]:
    """Metric depth per pixel (0 where no return) and the validity mask."""
    valid = img.valid
    depth = (img.depth.astype(np.float64) + 1.0) / 2.0 * img.r_max
    return np.where(valid, depth, 0.0), valid


def snap_sentinel(depth: np.ndarray, r_max: float, min_range: float) -> np.ndarray:
    """Clamp to [-1, 1] and mark pixels nearer than ``min_range`` meters as no-return.

    Decoded images are continuous; a pixel closer than any physical return
    is read as the sentinel.
    """
    d = np.clip(np.asarray(depth, dtype=np.float32), -1.0, 1.0)
    cut = 2.0 * min_range / r_max - 1.0
    return np.where(d < cut, np.float32(SENTINEL), d).astype(np.float32)


# ---------------------------------------------------------------- files

_LPC_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("beam", "<u2"), ("pad", "<u2")])


def write_rimg(path: str | Path, img: RangeImage) -> None:
    head = b"RIM1" + struct.pack("<IIf", img.H, img.W, img.r_max)
    Path(path).write_bytes(head + img.depth.astype("<f4").tobytes())


def read_rimg(path: str | Path) -> RangeImage:
    buf = Path(path).read_bytes()
    if buf[:4] != b"RIM1":
        raise CodecError(f"{path}: not a .rimg file")
    H, W, r_max = struct.unpack_from("<IIf", buf, 4)
    n = H * W
    if len(buf) < 16 + 4 * n:
        raise CodecError(f"{path}: truncated range image")
    depth = np.frombuffer(buf, dtype="<f4", count=n, offset=16).reshape(H, W)
    return RangeImage(depth.astype(np.float32), float(r_max))


def write_lpc(path: str | Path, cloud: PointCloud) -> None:
    rec = np.zeros(len(cloud), dtype=_LPC_DTYPE)
    if len(cloud):
        rec["x"], rec["y"], rec["z"] = cloud.points.T
        rec["beam"] = cloud.beam
    Path(path).write_bytes(b"LPC1" + struct.pack("<I", len(cloud)) + rec.tobytes())


def read_lpc(path: str | Path) -> PointCloud:
    buf = Path(path).read_bytes()
    if buf[:4] != b"LPC1":
        raise CodecError(f"{path}: not a .lpc file")
    (count,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + count * _LPC_DTYPE.itemsize:
        raise CodecError(f"{path}: truncated point cloud")
    rec = np.frombuffer(buf, dtype=_LPC_DTYPE, count=count, offset=8)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    return PointCloud(pts, rec["beam"].astype(np.int64))


def pgm_bytes(img: RangeImage) -> bytes:
    px = np.floor((img.depth.astype(np.float64) + 1.0) / 2.0 * 255.0 + 0.5)
    px = np.where(img.valid, px, 0).clip(0, 255).astype(np.uint8)
    return f"P5\n{img.W} {img.H}\n255\n".encode("ascii") + px.tobytes()


def write_pgm(path: str | Path, img: RangeImage) -> None:
    Path(path).write_bytes(pgm_bytes(img))


def read_pgm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise CodecError(f"{path}: only 8-bit P5 PGM is supported")
    W, H = int(tokens[1]), int(tokens[2])
    return np.frombuffer(buf, dtype=np.uint8, count=W * H, offset=pos + 1).reshape(H, W)
