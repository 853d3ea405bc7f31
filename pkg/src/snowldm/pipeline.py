"""Stage wiring shared by the CLI and the tests: checkpoint handoff between
training stages, scene augmentation and cloud evaluation."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import PipelineConfig
from .diffusion import partial_augment
from .metrics import DEFAULT_RESOLUTION, chamfer, jsd_voxel
from .nets import ADVERSE, Autoencoder, Denoiser
from .postprocess import postprocess
from .range_codec import (
    PointCloud, RangeImage, SensorConfig, read_lpc, read_rimg, snap_sentinel, unproject, write_rimg,
)
from .tensor import ShapeError, Tensor
from .train import load_pairs, train_autoencoder, train_ldm

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


def _sensor_vector(sensor: SensorConfig) -> np.ndarray:
    return np.array([sensor.H, sensor.W, sensor.r_max], dtype=np.float32)


def check_sensor(state: dict, sensor: SensorConfig, stage: str) -> None:
    """Reject a checkpoint trained for a different image size or range."""
    if "ae.sensor" not in state:
        return
    H, W, r_max = state["ae.sensor"]
    if (int(H), int(W)) != (sensor.H, sensor.W) or not np.isclose(r_max, sensor.r_max):
        raise StageError(stage, f"checkpoint was trained on {int(H)}x{int(W)} images with r_max {r_max:g}, "
                                f"config has {sensor.H}x{sensor.W} with r_max {sensor.r_max:g}")


# ---------------------------------------------------------------- training

def _load_dataset(data_dir, sensor: SensorConfig, stage: str):
    try:
        clear, snow, r_max = load_pairs(data_dir)
    except (OSError, ValueError) as exc:
        raise StageError(stage, f"cannot load dataset {data_dir}: {exc}") from exc
    if clear.shape[1:] != (sensor.H, sensor.W) or not np.isclose(r_max, sensor.r_max):
        raise StageError(stage, f"dataset images are {clear.shape[1]}x{clear.shape[2]} with r_max {r_max:g}, "
                                f"config expects {sensor.H}x{sensor.W} with r_max {sensor.r_max:g}")
    return clear, snow


def run_train_ae(data_dir, out_ckpt, cfg: PipelineConfig, log_path=None) -> list[tuple]:
    sensor = cfg.sensor()
    clear, snow = _load_dataset(data_dir, sensor, "train-ae")
    ae, rows = train_autoencoder(clear, snow, cfg.encoder(), cfg.ae_train(), log_path)
    state = ae.to_state()
    state["ae.sensor"] = _sensor_vector(sensor)
    checkpoint.save(out_ckpt, state)
    return rows


def load_autoencoder(path, sensor: SensorConfig, stage: str) -> Autoencoder:
    try:
        state = checkpoint.load(path)
    except (OSError, ValueError) as exc:
        raise StageError(stage, f"cannot read autoencoder checkpoint {path}: {exc}") from exc
    check_sensor(state, sensor, stage)
    try:
        return Autoencoder.from_state(state)
    except (ValueError, KeyError) as exc:
        raise StageError(stage, f"bad autoencoder checkpoint {path}: {exc}") from exc


def load_denoiser(path, ae: Autoencoder, cfg: PipelineConfig, stage: str) -> Denoiser:
    try:
        model = Denoiser.from_state(checkpoint.load(path))
    except (OSError, ValueError, KeyError) as exc:
        raise StageError(stage, f"bad denoiser checkpoint {path}: {exc}") from exc
    if model.cfg.n_z != ae.cfg.n_z:
        raise StageError(stage, f"denoiser has n_z={model.cfg.n_z} but autoencoder latents have {ae.cfg.n_z}")
    if model.cfg.T != cfg.diffusion_T:
        raise StageError(stage, f"denoiser was trained with T={model.cfg.T}, config has T={cfg.diffusion_T}")
    return model


def run_train_ldm(data_dir, ae_ckpt, out_ckpt, cfg: PipelineConfig, log_path=None) -> list[tuple]:
    sensor = cfg.sensor()
    ae = load_autoencoder(ae_ckpt, sensor, "train-ldm")
    clear, snow = _load_dataset(data_dir, sensor, "train-ldm")
    model, rows = train_ldm(ae, clear, snow, cfg.ldm_train(), cfg.guidance(), cfg.schedule(),
                            cfg.ldm_channels, log_path)
    checkpoint.save(out_ckpt, model.to_state())
    return rows


# ---------------------------------------------------------------- augmentation

@dataclass
class Augmented:
    y: RangeImage
    refined: RangeImage


def augment_scene(x: RangeImage, ae: Autoencoder, model: Denoiser, cfg: PipelineConfig,
                  rng: np.random.Generator) -> Augmented:
    """encode, quantize, partially diffuse toward snow, decode and refine."""
    try:
        z = ae.quantize(ae.encode(Tensor(x.depth[None]))).z_q.data
    except ShapeError as exc:
        raise StageError("encode", str(exc)) from exc
    z_aug = partial_augment(model, z, cfg.diffusion_t_aug, cfg.schedule(), rng, b=ADVERSE, w=cfg.diffusion_w)
    if cfg.diffusion_requantize:
        z_aug = ae.quantize(Tensor(z_aug)).z_q.data
    decoded = ae.decode(Tensor(z_aug)).data[0]
    y = RangeImage(snap_sentinel(decoded, x.r_max, cfg.min_range), x.r_max)
    return Augmented(y, postprocess(x, y, cfg.postprocess()))


def _augment_job(args):
    path, out_dir, ae_ckpt, ldm_ckpt, cfg, seed = args
    sensor = cfg.sensor()
    ae = load_autoencoder(ae_ckpt, sensor, "augment")
    model = load_denoiser(ldm_ckpt, ae, cfg, "augment")
    try:
        x = read_rimg(path)
    except (OSError, ValueError) as exc:
        raise StageError("augment", f"cannot read {path}: {exc}") from exc
    if (x.H, x.W) != (sensor.H, sensor.W) or not np.isclose(x.r_max, sensor.r_max):
        raise StageError("augment", f"{path} is {x.H}x{x.W} with r_max {x.r_max:g}, "
                                    f"models expect {sensor.H}x{sensor.W} with r_max {sensor.r_max:g}")
    out = augment_scene(x, ae, model, cfg, np.random.default_rng(seed))
    stem = Path(path).name.removesuffix(".rimg")
    y_path, r_path = Path(out_dir) / f"{stem}_y.rimg", Path(out_dir) / f"{stem}_y_refined.rimg"
    write_rimg(y_path, out.y)
    write_rimg(r_path, out.refined)
    return y_path, r_path


def run_augment(inputs, ae_ckpt, ldm_ckpt, out_dir, cfg: PipelineConfig, jobs: int = 1):
    """Augment each clear image with its own rng stream (seed + index)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    work = [(p, out, ae_ckpt, ldm_ckpt, cfg, cfg.seed + i) for i, p in enumerate(inputs)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_augment_job, work))
    results = []
    for i, job in enumerate(work):
        results.append(_augment_job(job))
        log.info("augmented %d/%d", i + 1, len(work))
    return results


# ---------------------------------------------------------------- evaluation

def load_cloud(path, sensor: SensorConfig | None = None) -> tuple[PointCloud, tuple[int, int] | None]:
    """A cloud from ``.lpc`` or ``.rimg``; the second value is the image size, if any."""
    path = Path(path)
    if path.suffix == ".rimg":
        img = read_rimg(path)
        if sensor is None or (sensor.H, sensor.W) != (img.H, img.W):
            sensor = SensorConfig.toy(H=img.H, W=img.W, r_max=img.r_max)
        return unproject(img, replace(sensor, r_max=img.r_max)), (img.H, img.W)
    return read_lpc(path), None


def evaluate(ref, hyp, resolution: float = DEFAULT_RESOLUTION, sensor: SensorConfig | None = None):
    """(CD, JSD) between two cloud files."""
    if not resolution > 0 or not np.isfinite(resolution):
        raise StageError("eval", f"voxel resolution must be a positive number, got {resolution}")
    a, size_a = load_cloud(ref, sensor)
    b, size_b = load_cloud(hyp, sensor)
    if size_a and size_b and size_a != size_b:
        raise StageError("eval", f"image resolutions differ: {size_a[0]}x{size_a[1]} vs {size_b[0]}x{size_b[1]}")
    if len(a) == 0 or len(b) == 0:
        raise StageError("eval", "cannot compare an empty cloud")
    return chamfer(a, b), jsd_voxel(a, b, resolution)


def reconstruct_images(ae: Autoencoder, imgs: np.ndarray, r_max: float, min_range: float,
                       batch: int = 32) -> np.ndarray:
    """Decoded (N, H, W) images with the no-return sentinel restored."""
    out = []
    for s in range(0, imgs.shape[0], batch):
        x_hat, _, _ = ae.reconstruct(Tensor(imgs[s:s + batch]))
        out.append(snap_sentinel(x_hat.data, r_max, min_range))
    return np.concatenate(out)


def reconstruction_scores(ae: Autoencoder, imgs: np.ndarray, sensor: SensorConfig, min_range: float,
                          resolution: float = DEFAULT_RESOLUTION) -> tuple[float, float]:
    """Mean CD and mean JSD of held-out images against their reconstructions."""
    rec = reconstruct_images(ae, imgs, sensor.r_max, min_range)
    cds, jsds = [], []
    for a, b in zip(imgs, rec):
        ca = unproject(RangeImage(a, sensor.r_max), sensor)
        cb = unproject(RangeImage(b, sensor.r_max), sensor)
        cds.append(chamfer(ca, cb))
        jsds.append(jsd_voxel(ca, cb, resolution))
    return float(np.mean(cds)), float(np.mean(jsds))
