"""``snowldm`` command line: dataset synthesis, training, augmentation,
refinement, evaluation and figure export.

Results go to stdout, progress to stderr.  A failure exits nonzero with a
message naming the stage.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import ConfigError, PipelineConfig
from .metrics import DEFAULT_RESOLUTION
from .pipeline import StageError
from .postprocess import postprocess
from .range_codec import project, read_lpc, read_rimg, unproject, write_lpc, write_pgm, write_rimg
from .synthdata import gen_dataset, near_field_count

log = logging.getLogger("snowldm")


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    # dedicated flags win over --set, which wins over the file
    keys = dict(_FLAG_KEYS)
    if getattr(args, "steps_key", None):
        keys["steps"] = args.steps_key
    for flag, key in keys.items():
        value = getattr(args, flag, None)
        if value is not None:
            pairs[key] = str(value)
    return cfg.update(pairs)


_FLAG_KEYS = {
    "seed": "seed",
    "quantizer": "ae.quantizer",
    "codebook_size": "ae.codebook_size",
    "t_aug": "diffusion.t_aug",
    "w": "diffusion.w",
    "lam": "postprocess.lambda",
    "nu": "postprocess.nu",
}


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg):
    rows = gen_dataset(args.out, args.n, cfg.sensor(), cfg.snow(), seed=cfg.seed, jobs=args.jobs)
    print(f"wrote {len(rows)} scene pairs to {args.out}")


def cmd_project(args, cfg):
    img = project(read_lpc(args.input), cfg.sensor())
    write_rimg(args.output, img)
    print(f"{args.output}\t{int(img.valid.sum())} valid pixels")


def cmd_unproject(args, cfg):
    img = read_rimg(args.input)
    sensor = cfg.sensor()
    if (img.H, img.W) != (sensor.H, sensor.W):
        raise StageError("unproject", f"image is {img.H}x{img.W} but the sensor is {sensor.H}x{sensor.W}")
    cloud = unproject(img, sensor)
    write_lpc(args.output, cloud)
    print(f"{args.output}\t{len(cloud)} points")


def cmd_train_ae(args, cfg):
    rows = pipeline.run_train_ae(args.data, args.output, cfg, args.log)
    print(f"{args.output}\tL_rec {rows[0][1]:.6f} -> {rows[-1][1]:.6f}")


def cmd_train_ldm(args, cfg):
    rows = pipeline.run_train_ldm(args.data, args.ae, args.output, cfg, args.log)
    print(f"{args.output}\tL_eps {rows[0][1]:.6f} -> {rows[-1][1]:.6f}")


def cmd_augment(args, cfg):
    for y, refined in pipeline.run_augment(args.inputs, args.ae, args.ldm, args.out, cfg, jobs=args.jobs):
        print(f"{y}\t{refined}")


def cmd_postprocess(args, cfg):
    try:
        x, y = read_rimg(args.clear), read_rimg(args.adverse)
        out = postprocess(x, y, cfg.postprocess())
    except (OSError, ValueError) as exc:
        raise StageError("postprocess", str(exc)) from exc
    write_rimg(args.output, out)
    print(args.output)


def cmd_eval(args, cfg):
    cd, jsd = pipeline.evaluate(args.ref, args.hyp, args.resolution, cfg.sensor())
    print(f"CD {cd:.6f}")
    print(f"JSD {jsd:.6f}")


def cmd_export_pgm(args, cfg):
    write_pgm(args.output, read_rimg(args.input))
    print(args.output)


def cmd_report(args, cfg):
    from .plotting import plot_losses, plot_range_images, smooth

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.log:
        from .train import read_log
        logs = {Path(p).stem: read_log(p) for p in args.log}
        plot_losses(logs, out / "losses.png")
        with open(out / "losses.tsv", "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["log", "column", "first", "last", "smoothed_last"])
            for name, (header, data) in logs.items():
                for j, col in enumerate(header[1:], 1):
                    w.writerow([name, col, f"{data[0, j]:.6g}", f"{data[-1, j]:.6g}",
                                f"{smooth(data[:, j])[-1]:.6g}"])
        print(out / "losses.png")
    if args.image:
        imgs = [(Path(p).name, read_rimg(p)) for p in args.image]
        plot_range_images(imgs, out / "images.png")
        w = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
        with open(out / "images.tsv", "w", newline="") as fh:
            table = csv.writer(fh, delimiter="\t", lineterminator="\n")
            header = ["image", "valid", "near_field", "mean_range_m"]
            table.writerow(header)
            w.writerow(header)
            for name, img in imgs:
                depth = (img.depth.astype(np.float64) + 1) / 2 * img.r_max
                mean = float(depth[img.valid].mean()) if img.valid.any() else float("nan")
                row = [name, int(img.valid.sum()), near_field_count(depth, img.valid), f"{mean:.4f}"]
                table.writerow(row)
                w.writerow(row)
        print(out / "images.png")
    if not args.log and not args.image:
        raise StageError("report", "nothing to report: pass --log and/or --image")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value pipeline config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="global seed (config key 'seed')")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-scene work")
    common.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")

    p = argparse.ArgumentParser(prog="snowldm", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate paired clear/snow scenes")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=200)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("project", parents=[common], help="point cloud (.lpc) to range image (.rimg)")
    s.add_argument("input")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("unproject", parents=[common], help="range image (.rimg) to point cloud (.lpc)")
    s.add_argument("input")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_unproject)

    s = sub.add_parser("train-ae", parents=[common], help="train the quantized autoencoder")
    s.add_argument("--data", required=True, help="dataset directory with dataset.txt")
    s.add_argument("-o", "--output", required=True, help="checkpoint path")
    s.add_argument("--log", help="CSV loss log path")
    s.add_argument("--quantizer", choices=("vq", "lq"))
    s.add_argument("--codebook-size", type=int)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train_ae, steps_key="ae.steps")

    s = sub.add_parser("train-ldm", parents=[common], help="train the conditioned latent denoiser")
    s.add_argument("--data", required=True)
    s.add_argument("--ae", required=True, help="autoencoder checkpoint")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--log")
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train_ldm, steps_key="ldm.steps")

    s = sub.add_parser("augment", parents=[common], help="clear range images to snowy ones")
    s.add_argument("inputs", nargs="+", help="clear .rimg files")
    s.add_argument("--ae", required=True)
    s.add_argument("--ldm", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--t-aug", type=int)
    s.add_argument("--w", type=float, help="guidance weight")
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--nu", type=float)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("postprocess", parents=[common], help="depth-threshold refinement")
    s.add_argument("--clear", required=True)
    s.add_argument("--adverse", required=True)
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--nu", type=float)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_postprocess)

    s = sub.add_parser("eval", parents=[common], help="CD and JSD between two clouds")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True)
    s.add_argument("--resolution", type=float, default=DEFAULT_RESOLUTION, help="voxel edge in meters")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-pgm", parents=[common], help="range image to an 8-bit PGM")
    s.add_argument("input")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_export_pgm)

    s = sub.add_parser("report", parents=[common], help="loss and range-image figures plus TSV tables")
    s.add_argument("--log", action="append", help="CSV training log (repeatable)")
    s.add_argument("--image", action="append", help=".rimg to render (repeatable)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(name)s: %(message)s")
    stage = args.command
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = _config(args)
        args.func(args, cfg)
    except StageError as exc:
        print(f"snowldm: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"snowldm: config: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"snowldm: {stage}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
