"""Image, mask and force-frame types plus raster and manifest I/O.

Intensities live in [0, 1] as float64 inside the package; 8-bit quantisation
happens only when reading or writing files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
from PIL import Image as PILImage

from .errors import FormatError, ShapeError, ValidationError

PathLike = Union[str, Path]

MODES = ("scan", "palpation")
FORCE_MIN_N = 0.1
FORCE_MAX_N = 100.0
MANIFEST_KEYS = ("path", "force_n", "subject", "mode")
# Optional per-record keys: a label path and a provenance flag for generated frames.
MANIFEST_OPTIONAL_KEYS = ("mask", "synthetic")

_LUMA = np.array([0.299, 0.587, 0.114])


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Image:
    """Dense grayscale raster, shape (height, width), values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ShapeError(f"image must be 2-D, got {arr.ndim}-D")
        h, w = arr.shape
        if w < 2 or h < 2:
            raise ShapeError(f"image must be at least 2x2, got {w}x{h}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("image contains non-finite intensities")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError(
                f"image intensities must lie in [0, 1], got [{arr.min():.6g}, {arr.max():.6g}]"
            )
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"Image({self.width}x{self.height})"


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Binary raster, shape (height, width), values exactly 0 or 1 (uint8)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got {arr.ndim}-D")
        if arr.dtype != bool and not np.all((arr == 0) | (arr == 1)):
            raise ValidationError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", _readonly(arr.astype(np.uint8)))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def area(self) -> int:
        return int(self.data.sum())

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"BinaryMask({self.width}x{self.height}, area={self.area()})"


@dataclass(frozen=True)
class ForceFrame:
    """An image captured at a known probe contact force."""

    image: Image
    force: float
    subject: str = ""
    mode: str = "scan"

    def __post_init__(self):
        _check_force(self.force)
        _check_mode(self.mode)


@dataclass(frozen=True)
class FrameRecord:
    """One manifest line: where a frame lives and the force it was taken at."""

    path: Path
    force_n: float
    subject: str
    mode: str
    mask: Optional[Path] = None
    synthetic: bool = False

    def load(self) -> ForceFrame:
        return ForceFrame(load_image(self.path), self.force_n, self.subject, self.mode)

    def to_json(self, relative_to: Optional[Path] = None) -> dict:
        def rel(p: Path) -> str:
            if relative_to is None:
                return str(p)
            try:
                return str(Path(p).relative_to(relative_to))
            except ValueError:
                return str(p)

        out = {"path": rel(self.path), "force_n": self.force_n, "subject": self.subject, "mode": self.mode}
        if self.mask is not None:
            out["mask"] = rel(self.mask)
        if self.synthetic:
            out["synthetic"] = True
        return out


def _check_force(force) -> None:
    if not isinstance(force, (int, float)) or isinstance(force, bool) or not math.isfinite(force):
        raise ValidationError(f"force must be a finite number, got {force!r}")
    if not FORCE_MIN_N <= force <= FORCE_MAX_N:
        raise ValidationError(f"force {force} N outside [{FORCE_MIN_N}, {FORCE_MAX_N}] N")


def _check_mode(mode) -> None:
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")


def as_array(img) -> np.ndarray:
    """Return the float64 pixel array behind an Image, BinaryMask or ndarray."""
    if isinstance(img, (Image, BinaryMask)):
        return img.data.astype(np.float64, copy=False)
    return np.asarray(img, dtype=np.float64)


# --- raster I/O -------------------------------------------------------------


def _read_pgm(raw: bytes, path: Path) -> np.ndarray:
    # P5 header: magic, width, height, maxval separated by whitespace; '#' comments allowed.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: unsupported PGM maxval {maxval} (only 255 / 8-bit is supported)")
    payload = raw[pos : pos + width * height]
    if len(payload) != width * height:
        raise FormatError(f"{path}: truncated PGM raster ({len(payload)} of {width * height} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width)


def _read_png(path: Path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            im.load()
            fmt, mode = im.format, im.mode
            if fmt != "PNG":
                raise FormatError(f"{path}: unsupported image format {fmt!r}")
            if mode == "L":
                return np.asarray(im, dtype=np.uint8)
            if mode == "RGB":
                rgb = np.asarray(im, dtype=np.float64)
                # Quantise luminance back to 8-bit so RGB-wrapped grayscale is lossless.
                return np.clip(np.round(rgb @ _LUMA), 0, 255).astype(np.uint8)
            raise FormatError(f"{path}: unsupported PNG mode {mode!r} (bit depth / colour type); need 8-bit L or RGB")
    except PILImage.UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a PNG or PGM file") from exc


def read_raster_u8(path: PathLike) -> np.ndarray:
    """Read an 8-bit grayscale raster from PGM (P5) or PNG as uint8."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"P5":
        return _read_pgm(raw, path)
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        return _read_png(path)
    raise FormatError(f"{path}: unsupported file format (expected PGM P5 or PNG)")


def load_image(path: PathLike) -> Image:
    u8 = read_raster_u8(path)
    return Image(u8.astype(np.float64) / 255.0)


def quantize(data) -> np.ndarray:
    arr = np.clip(as_array(data), 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8)


def write_raster_u8(arr: np.ndarray, path: PathLike) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        h, w = arr.shape[:2]
        with open(path, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (w, h))
            fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())
        return
    mode = "RGB" if arr.ndim == 3 else "L"
    # Open the file ourselves so unwritable paths surface as OSError.
    with open(path, "wb") as fh:
        PILImage.fromarray(np.ascontiguousarray(arr, dtype=np.uint8), mode=mode).save(fh, format="PNG")


def save_image(img: Image, path: PathLike) -> None:
    """Write ``img`` as 8-bit PNG (or PGM when the suffix is ``.pgm``)."""
    write_raster_u8(quantize(img), path)


def save_rgb(rgb: np.ndarray, path: PathLike) -> None:
    """Write an (H, W, 3) uint8 array as an RGB PNG."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) array, got {rgb.shape}")
    write_raster_u8(rgb.astype(np.uint8), path)


def load_mask(path: PathLike) -> BinaryMask:
    """Masks are stored as 8-bit rasters; any nonzero byte is foreground."""
    return BinaryMask((read_raster_u8(path) > 0).astype(np.uint8))


def save_mask(mask: BinaryMask, path: PathLike) -> None:
    write_raster_u8(mask.data.astype(np.uint8) * 255, path)


# --- manifests --------------------------------------------------------------


def parse_manifest_line(obj, lineno: int, base: Path) -> FrameRecord:
    if not isinstance(obj, dict):
        raise ValidationError(f"manifest line {lineno}: expected a JSON object")
    missing = [k for k in MANIFEST_KEYS if k not in obj]
    if missing:
        raise FormatError(f"manifest line {lineno}: missing field(s) {', '.join(missing)}")
    extra = sorted(set(obj) - set(MANIFEST_KEYS) - set(MANIFEST_OPTIONAL_KEYS))
    if extra:
        raise ValidationError(f"manifest line {lineno}: unknown field(s) {', '.join(extra)}")
    try:
        _check_force(obj["force_n"])
        _check_mode(obj["mode"])
    except ValidationError as exc:
        raise ValidationError(f"manifest line {lineno}: {exc}") from None
    if not isinstance(obj["path"], str) or not isinstance(obj["subject"], str):
        raise ValidationError(f"manifest line {lineno}: path and subject must be strings")
    mask = obj.get("mask")
    return FrameRecord(
        path=base / obj["path"],
        force_n=float(obj["force_n"]),
        subject=obj["subject"],
        mode=obj["mode"],
        mask=None if mask is None else base / mask,
        synthetic=bool(obj.get("synthetic", False)),
    )


def load_manifest(path: PathLike) -> list[FrameRecord]:
    """Parse a JSON-lines manifest; image paths resolve against its directory.

    Blank lines are ignored. The first bad line raises with its 1-based number.
    """
    path = Path(path)
    base = path.parent
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"manifest line {lineno}: invalid JSON ({exc.msg})") from None
            records.append(parse_manifest_line(obj, lineno, base))
    return records


def write_manifest(records: Iterable[FrameRecord], path: PathLike) -> None:
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            rec = FrameRecord(
                Path(rec.path).resolve(), rec.force_n, rec.subject, rec.mode,
                None if rec.mask is None else Path(rec.mask).resolve(), rec.synthetic,
            )
            fh.write(json.dumps(rec.to_json(relative_to=base), sort_keys=False) + "\n")
