"""Native raster operations: crop, zoom, overlay.

Rectangles are (x, y, w, h) in pixel coordinates with the origin at the
top-left corner. Model-emitted rectangles are noisy, so every operation
clamps to image bounds instead of rejecting; only a degenerate result
(empty region, no intersection) is an error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import VisreasonError
from .images import as_image


class RasterError(VisreasonError):
    pass


class EmptyRegion(RasterError):
    pass


class FactorOutOfRange(RasterError):
    pass


class NoIntersection(RasterError):
    pass


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    def clamp_to(self, width: int, height: int) -> "Rect":
        """Intersect with the image bounds [0, width) x [0, height)."""
        x0 = min(max(self.x, 0), width)
        y0 = min(max(self.y, 0), height)
        x1 = min(max(self.x + self.w, 0), width)
        y1 = min(max(self.y + self.h, 0), height)
        return Rect(x0, y0, max(x1 - x0, 0), max(y1 - y0, 0))

    @property
    def area(self) -> int:
        return self.w * self.h


def crop(image: np.ndarray, rect: Rect) -> np.ndarray:
    image = as_image(image)
    r = rect.clamp_to(image.shape[1], image.shape[0])
    if r.area == 0:
        raise EmptyRegion(f"rect {rect} clamps to an empty region on a "
                          f"{image.shape[1]}x{image.shape[0]} image")
    return np.ascontiguousarray(image[r.y:r.y + r.h, r.x:r.x + r.w])


def zoom_in(image: np.ndarray, rect: Rect, factor: float) -> np.ndarray:
    """Crop then nearest-neighbor upscale; output size is floor(rect size * factor)."""
    if not math.isfinite(factor) or factor < 1.0:
        raise FactorOutOfRange(f"zoom factor must be >= 1, got {factor}")
    region = crop(image, rect)
    out_h = int(region.shape[0] * factor)
    out_w = int(region.shape[1] * factor)
    if out_h == 0 or out_w == 0:
        raise EmptyRegion(f"zoom output would be {out_w}x{out_h}")
    return kernels.zoom_nearest(region, out_h, out_w, factor)


def overlay(base: np.ndarray, layer: np.ndarray, offset: tuple[int, int], alpha: float) -> np.ndarray:
    """Alpha-blend layer over base at offset; pixels outside the intersection are untouched."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    base = as_image(base)
    layer = as_image(layer)
    dx, dy = offset
    bx0, by0 = max(dx, 0), max(dy, 0)
    bx1 = min(dx + layer.shape[1], base.shape[1])
    by1 = min(dy + layer.shape[0], base.shape[0])
    if bx0 >= bx1 or by0 >= by1:
        raise NoIntersection(f"layer {layer.shape[1]}x{layer.shape[0]} at offset {offset} "
                             f"does not intersect base {base.shape[1]}x{base.shape[0]}")
    out = base.copy()
    lx0, ly0 = bx0 - dx, by0 - dy
    out[by0:by1, bx0:bx1] = kernels.alpha_blend(
        base[by0:by1, bx0:bx1],
        layer[ly0:ly0 + (by1 - by0), lx0:lx0 + (bx1 - bx0)],
        alpha,
    )
    return out
