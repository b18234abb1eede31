"""Difference-of-Gaussians keypoints and the binary feature maps built from them."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter, minimum_filter

from .errors import ShapeError, ValidationError
from .imagecore import BinaryMask, Image, as_array

MIN_SIDE = 16
DEFAULT_RADIUS = 8


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    response: float


@dataclass(frozen=True)
class DetectorSettings:
    octaves: int = 3
    levels: int = 3
    sigma: float = 1.6
    contrast_threshold: float = 0.03
    # Blur already present in the input raster.
    assumed_blur: float = 0.5
    refine_steps: int = 5

    def __post_init__(self):
        if self.octaves < 1 or self.levels < 1:
            raise ValidationError("octaves and levels must be >= 1")
        if self.sigma <= self.assumed_blur:
            raise ValidationError("sigma must exceed the assumed input blur")
        if self.contrast_threshold < 0:
            raise ValidationError("contrast_threshold must be >= 0")


def _octave_dogs(base: np.ndarray, cfg: DetectorSettings):
    s = cfg.levels
    sigmas = [cfg.sigma * 2.0 ** (i / s) for i in range(s + 3)]
    gauss = [base]
    for i in range(1, s + 3):
        inc = math.sqrt(sigmas[i] ** 2 - sigmas[i - 1] ** 2)
        gauss.append(gaussian_filter(gauss[-1], inc, mode="nearest", truncate=4.0))
    dogs = np.stack([gauss[i + 1] - gauss[i] for i in range(s + 2)])
    return gauss, dogs


def _refine(dogs: np.ndarray, cand: np.ndarray, steps: int):
    """Quadratic sub-sample refinement of (level, row, col) candidates.

    Returns refined offsets, final integer positions and interpolated DoG values;
    candidates that wander off the searchable volume are dropped.
    """
    nl, h, w = dogs.shape
    pos = cand.copy()
    keep = np.ones(len(pos), dtype=bool)
    off = np.zeros((len(pos), 3))
    for _ in range(max(steps, 1)):
        l, r, c = pos[:, 0], pos[:, 1], pos[:, 2]
        d = lambda dl, dr, dc: dogs[l + dl, r + dr, c + dc]  # noqa: E731
        g = np.stack([
            0.5 * (d(1, 0, 0) - d(-1, 0, 0)),
            0.5 * (d(0, 1, 0) - d(0, -1, 0)),
            0.5 * (d(0, 0, 1) - d(0, 0, -1)),
        ], axis=1)
        v = d(0, 0, 0)
        hll = d(1, 0, 0) + d(-1, 0, 0) - 2 * v
        hrr = d(0, 1, 0) + d(0, -1, 0) - 2 * v
        hcc = d(0, 0, 1) + d(0, 0, -1) - 2 * v
        hlr = 0.25 * (d(1, 1, 0) - d(1, -1, 0) - d(-1, 1, 0) + d(-1, -1, 0))
        hlc = 0.25 * (d(1, 0, 1) - d(1, 0, -1) - d(-1, 0, 1) + d(-1, 0, -1))
        hrc = 0.25 * (d(0, 1, 1) - d(0, 1, -1) - d(0, -1, 1) + d(0, -1, -1))
        hess = np.stack([
            np.stack([hll, hlr, hlc], axis=1),
            np.stack([hlr, hrr, hrc], axis=1),
            np.stack([hlc, hrc, hcc], axis=1),
        ], axis=1)
        det = np.linalg.det(hess)
        ok = np.abs(det) > 1e-12
        step = np.zeros_like(g)
        if ok.any():
            step[ok] = -np.linalg.solve(hess[ok], g[ok][..., None])[..., 0]
        off = step
        move = np.abs(off) > 0.5
        moving = move.any(axis=1) & keep
        if not moving.any():
            break
        pos[moving] += np.round(off[moving]).astype(pos.dtype)
        inside = (
            (pos[:, 0] >= 1) & (pos[:, 0] <= nl - 2)
            & (pos[:, 1] >= 1) & (pos[:, 1] <= h - 2)
            & (pos[:, 2] >= 1) & (pos[:, 2] <= w - 2)
        )
        keep &= inside
        pos[~inside] = cand[~inside]
    l, r, c = pos[:, 0], pos[:, 1], pos[:, 2]
    value = dogs[l, r, c] + 0.5 * np.einsum("ij,ij->i", g, off)
    # Offsets that never settled inside the unit cell are not trusted.
    settled = np.all(np.abs(off) <= 0.5 + 1e-9, axis=1)
    off = np.where(settled[:, None], off, 0.0)
    value = np.where(settled, value, dogs[l, r, c])
    return pos[keep], off[keep], value[keep]


def detect_keypoints(img, cfg: DetectorSettings = DetectorSettings()) -> list[Keypoint]:
    """DoG scale-space extrema, sorted by (response desc, y, x)."""
    arr = as_array(img)
    h, w = arr.shape
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ShapeError(f"keypoint detection needs at least {MIN_SIDE}x{MIN_SIDE}, got {w}x{h}")
    base = gaussian_filter(arr, math.sqrt(cfg.sigma**2 - cfg.assumed_blur**2), mode="nearest", truncate=4.0)
    found = []
    for o in range(cfg.octaves):
        if min(base.shape) < 3:
            break
        gauss, dogs = _octave_dogs(base, cfg)
        mx = maximum_filter(dogs, size=3, mode="nearest")
        mn = minimum_filter(dogs, size=3, mode="nearest")
        thr = cfg.contrast_threshold
        ext = ((dogs == mx) & (dogs > thr)) | ((dogs == mn) & (dogs < -thr))
        # Only interior levels and pixels have a full 26-neighbourhood.
        ext[0] = ext[-1] = False
        ext[:, 0, :] = ext[:, -1, :] = False
        ext[:, :, 0] = ext[:, :, -1] = False
        cand = np.argwhere(ext)
        if len(cand):
            pos, off, val = _refine(dogs, cand, cfg.refine_steps)
            factor = 2.0**o
            for (l, r, c), (ol, orow, ocol), v in zip(pos, off, val):
                if abs(v) <= thr:
                    continue
                x = min(max((c + ocol) * factor, 0.0), w - 1.0)
                y = min(max((r + orow) * factor, 0.0), h - 1.0)
                scale = cfg.sigma * 2.0 ** ((l + ol) / cfg.levels) * factor
                found.append(Keypoint(float(x), float(y), float(scale), float(abs(v))))
        base = gauss[cfg.levels][::2, ::2]
    found.sort(key=lambda k: (-k.response, k.y, k.x))
    return found


def keypoint_mask(shape: tuple[int, int], keypoints, radius: float) -> BinaryMask:
    """Union of filled disks ``(X-cx)^2 + (Y-cy)^2 <= radius^2`` at rounded keypoint centres."""
    if radius < 1:
        raise ValidationError(f"radius must be >= 1, got {radius}")
    h, w = shape
    out = np.zeros((h, w), dtype=np.uint8)
    r = int(math.floor(radius))
    oy, ox = np.mgrid[-r : r + 1, -r : r + 1]
    disk = (ox**2 + oy**2) <= radius**2
    for kp in keypoints:
        cx, cy = int(math.floor(kp.x + 0.5)), int(math.floor(kp.y + 0.5))
        y0, y1 = max(cy - r, 0), min(cy + r + 1, h)
        x0, x1 = max(cx - r, 0), min(cx + r + 1, w)
        if y0 >= y1 or x0 >= x1:
            continue
        sub = disk[y0 - (cy - r) : y1 - (cy - r), x0 - (cx - r) : x1 - (cx - r)]
        out[y0:y1, x0:x1] |= sub.astype(np.uint8)
    return BinaryMask(out)


def feature_map(img, radius: float = DEFAULT_RADIUS, cfg: DetectorSettings = DetectorSettings()) -> BinaryMask:
    """Disks around detected keypoints; all-ones when nothing is detected."""
    if radius < 1:
        raise ValidationError(f"radius must be >= 1, got {radius}")
    arr = as_array(img)
    kps = detect_keypoints(arr, cfg)
    if not kps:
        return BinaryMask(np.ones(arr.shape, dtype=np.uint8))
    return keypoint_mask(arr.shape, kps, radius)


def apply_feature_map(img, fmap) -> Image:
    a, m = as_array(img), as_array(fmap)
    if a.shape != m.shape:
        raise ShapeError(f"image {a.shape} and feature map {m.shape} differ")
    return Image(a * m)
