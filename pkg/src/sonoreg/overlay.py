"""Quick-look figures: displacement vectors or mask contours over an image.

Everything is drawn straight into an RGB array and written with the package's
own raster writer; no plotting library is involved.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import binary_erosion

from .errors import ShapeError, ValidationError
from .imagecore import BinaryMask, PathLike, as_array, save_rgb
from .warp import DeformationField

GRID_STEP = 4
ARROW_RGB = (255, 40, 40)
DOT_RGB = (40, 255, 40)
CONTOUR_RGB = (255, 220, 0)


def _base_rgb(image) -> np.ndarray:
    g = np.rint(np.clip(as_array(image), 0.0, 1.0) * 255.0).astype(np.uint8)
    return np.repeat(g[:, :, None], 3, axis=2)


def _check(image, shape, what):
    h, w = as_array(image).shape
    if (h, w) != tuple(shape):
        raise ShapeError(f"image is {w}x{h} but {what} is {shape[1]}x{shape[0]}")


def arrow_segments(u: DeformationField, step: int = GRID_STEP) -> np.ndarray:
    """Vector segments ``(x0, y0, x1, y1)`` sampled on a ``step``-pixel grid.

    Grid points sit at the centers of the ``step`` x ``step`` cells.
    """
    if step < 1:
        raise ValidationError("grid step must be >= 1")
    c = step // 2
    ys, xs = np.mgrid[c:u.height:step, c:u.width:step]
    xs, ys = xs.ravel(), ys.ravel()
    return np.stack([xs, ys, xs + u.dx[ys, xs], ys + u.dy[ys, xs]], axis=1).astype(np.float64)


def _draw_segment(rgb, x0, y0, x1, y1, color):
    h, w = rgb.shape[:2]
    n = int(np.ceil(max(abs(x1 - x0), abs(y1 - y0)))) + 1
    t = np.linspace(0.0, 1.0, n)
    px = np.rint(x0 + t * (x1 - x0)).astype(int)
    py = np.rint(y0 + t * (y1 - y0)).astype(int)
    ok = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    rgb[py[ok], px[ok]] = color


def field_overlay(image, u: DeformationField, step: int = GRID_STEP) -> np.ndarray:
    """RGB array with one vector per grid cell; the tail pixel is marked as a dot."""
    _check(image, u.shape, "field")
    rgb = _base_rgb(image)
    for x0, y0, x1, y1 in arrow_segments(u, step):
        _draw_segment(rgb, x0, y0, x1, y1, ARROW_RGB)
    for x0, y0, _, _ in arrow_segments(u, step):
        rgb[int(y0), int(x0)] = DOT_RGB
    return rgb


def mask_contour(mask: BinaryMask) -> np.ndarray:
    """Foreground pixels with at least one 4-connected background neighbour."""
    m = mask.data.astype(bool)
    return m & ~binary_erosion(m, border_value=0)


def mask_overlay(image, mask: BinaryMask) -> np.ndarray:
    _check(image, mask.shape, "mask")
    rgb = _base_rgb(image)
    rgb[mask_contour(mask)] = CONTOUR_RGB
    return rgb


def overlay(image, what, out: PathLike, step: int = GRID_STEP) -> np.ndarray:
    """Write a field or mask overlay PNG to ``out`` and return the RGB array."""
    if isinstance(what, DeformationField):
        rgb = field_overlay(image, what, step)
    elif isinstance(what, BinaryMask):
        rgb = mask_overlay(image, what)
    else:
        raise ValidationError(f"cannot overlay {type(what).__name__}")
    save_rgb(rgb, out)
    return rgb
