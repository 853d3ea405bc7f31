"""Depth-threshold refinement of generated adverse-weather range images.

Pixels whose generated depth stays close to the clear input are treated as
static environment and copied from the clear scene; the rest keep whichever
of the two is nearer, so generated clutter survives only where it occludes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .range_codec import CodecError, RangeImage, depth_of


@dataclass
class PostprocessParams:
    lam: float = 0.3   # threshold at zero depth, meters
    nu: float = 0.02   # growth rate per meter

    def __post_init__(self) -> None:
        if self.lam < 0 or self.nu < 0:
            raise ValueError(f"lambda and nu must be >= 0, got {self.lam}, {self.nu}")


def depth_threshold(d_y: np.ndarray, p: PostprocessParams) -> np.ndarray:
    return p.lam * np.exp(p.nu * np.asarray(d_y, dtype=np.float64))


def select_static(x: RangeImage, y: RangeImage, p: PostprocessParams) -> tuple[np.ndarray, np.ndarray]:
    """Masks (static, take_clear) per pixel.

    A no-return pixel on exactly one side is compared as if it were at r_max.
    """
    if x.depth.shape != y.depth.shape:
        raise CodecError(f"clear image {x.depth.shape} and adverse image {y.depth.shape} differ")
    if x.r_max != y.r_max:
        raise CodecError(f"r_max mismatch: {x.r_max} vs {y.r_max}")
    d_x, v_x = depth_of(x)
    d_y, v_y = depth_of(y)
    d_x = np.where(v_x, d_x, x.r_max)
    d_y = np.where(v_y, d_y, y.r_max)
    static = np.abs(d_x - d_y) < depth_threshold(d_y, p)
    return static, static | (d_x <= d_y)


def postprocess(x: RangeImage, y: RangeImage, p: PostprocessParams | None = None) -> RangeImage:
    """Refined adverse scene: every pixel is taken verbatim from ``x`` or ``y``."""
    p = p or PostprocessParams()
    _, take_clear = select_static(x, y, p)
    return RangeImage(np.where(take_clear, x.depth, y.depth), x.r_max)
