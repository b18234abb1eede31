"""Dense backward warping (the spatial transformer) and deformation fields.

Convention: ``output(p) = source(p + u(p))`` with ``u = (dx, dy)`` in pixels,
``+x`` to the right and ``+y`` down. Sample coordinates that leave the raster
are clamped to the border.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError, ValidationError
from .imagecore import BinaryMask, Image, PathLike, as_array

FIELD_MAGIC = b"UDF1"
_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Per-pixel displacement ``(dx, dy)``; both arrays have shape (height, width)."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        dx = np.array(self.dx, dtype=np.float64, copy=True)
        dy = np.array(self.dy, dtype=np.float64, copy=True)
        if dx.ndim != 2 or dx.shape != dy.shape:
            raise ShapeError(f"dx and dy must be equal 2-D arrays, got {dx.shape} and {dy.shape}")
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
            raise ValidationError("deformation field contains non-finite values")
        bound = max(dx.shape)
        if np.abs(dx).max(initial=0) > bound or np.abs(dy).max(initial=0) > bound:
            raise ValidationError(f"displacements exceed the sanity bound of {bound} px")
        dx.setflags(write=False)
        dy.setflags(write=False)
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)

    @classmethod
    def zeros(cls, height: int, width: int) -> "DeformationField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @classmethod
    def constant(cls, height: int, width: int, dx: float, dy: float) -> "DeformationField":
        return cls(np.full((height, width), float(dx)), np.full((height, width), float(dy)))

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)

    def as_float32(self) -> "DeformationField":
        """Round to the precision of the on-disk format."""
        return DeformationField(self.dx.astype(np.float32), self.dy.astype(np.float32))

    def __eq__(self, other):
        if not isinstance(other, DeformationField):
            return NotImplemented
        return (
            self.shape == other.shape
            and bool(np.array_equal(self.dx, other.dx))
            and bool(np.array_equal(self.dy, other.dy))
        )

    def __repr__(self):
        return f"DeformationField({self.width}x{self.height}, max|u|={self.magnitude().max():.3g})"


def _check_same(shape_a, shape_b, what="field and source"):
    if tuple(shape_a) != tuple(shape_b):
        raise ShapeError(f"{what} dimensions differ: {shape_a[1]}x{shape_a[0]} vs {shape_b[1]}x{shape_b[0]}")


def sample_bilinear(src: np.ndarray, xs: np.ndarray, ys: np.ndarray, grad: bool = False):
    """Bilinearly sample ``src`` at absolute coordinates with border clamping.

    With ``grad=True`` also returns the partial derivatives of each sample with
    respect to its own x and y coordinate (one-sided on the border itself).
    Derivatives are zero along an axis whose coordinate was clamped.
    """
    h, w = src.shape
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(yc).astype(np.intp), h - 2)
    fx = xc - x0
    fy = yc - y0
    i00 = src[y0, x0]
    i10 = src[y0, x0 + 1]
    i01 = src[y0 + 1, x0]
    i11 = src[y0 + 1, x0 + 1]
    # Weighted form keeps integer-coordinate samples exact, including fx == 1 at the far border.
    top = (1.0 - fx) * i00 + fx * i10
    bot = (1.0 - fx) * i01 + fx * i11
    out = (1.0 - fy) * top + fy * bot
    if not grad:
        return out
    gx = (i10 - i00) + fy * ((i11 - i01) - (i10 - i00))
    gy = bot - top
    gx = np.where((xs >= 0.0) & (xs <= w - 1.0), gx, 0.0)
    gy = np.where((ys >= 0.0) & (ys <= h - 1.0), gy, 0.0)
    return out, gx, gy


def warp_array(dx: np.ndarray, dy: np.ndarray, src: np.ndarray, grad: bool = False):
    """Array-level backward warp; see :func:`sample_bilinear` for ``grad``."""
    h, w = src.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return sample_bilinear(src, xs + dx, ys + dy, grad=grad)


def warp_image(field: DeformationField, source: Image) -> Image:
    src = as_array(source)
    _check_same(field.shape, src.shape)
    out = warp_array(field.dx, field.dy, src)
    # Convex combinations of in-range values; clip only guards last-ulp overshoot.
    return Image(np.clip(out, src.min(), src.max()))


def warp_mask(field: DeformationField, source: BinaryMask) -> BinaryMask:
    """Nearest-neighbour backward warp so labels stay binary."""
    src = source.data
    _check_same(field.shape, src.shape)
    h, w = src.shape
    ys, xs = np.mgrid[0:h, 0:w]
    xi = np.clip(np.floor(xs + field.dx + 0.5).astype(np.intp), 0, w - 1)
    yi = np.clip(np.floor(ys + field.dy + 0.5).astype(np.intp), 0, h - 1)
    return BinaryMask(src[yi, xi])


def field_lincomb(a: float, fa: DeformationField, b: float, fb: DeformationField) -> DeformationField:
    _check_same(fa.shape, fb.shape, "fields")
    return DeformationField(a * fa.dx + b * fb.dx, a * fa.dy + b * fb.dy)


def write_field(field: DeformationField, path: PathLike) -> None:
    """Write ``UDF1`` + uint32 width + uint32 height + interleaved float32 (dx, dy)."""
    payload = np.empty(field.shape + (2,), dtype="<f4")
    payload[..., 0] = field.dx
    payload[..., 1] = field.dy
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FIELD_MAGIC, field.width, field.height))
        fh.write(payload.tobytes())


def read_field(path: PathLike) -> DeformationField:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated field header")
    magic, width, height = _HEADER.unpack_from(raw)
    if magic != FIELD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FIELD_MAGIC!r}")
    expected = width * height * 8
    body = raw[_HEADER.size :]
    if len(body) != expected:
        raise FormatError(f"{path}: payload is {len(body)} bytes, expected {expected} for {width}x{height}")
    payload = np.frombuffer(body, dtype="<f4").reshape(height, width, 2)
    return DeformationField(payload[..., 0], payload[..., 1])
