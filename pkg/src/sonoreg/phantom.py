"""Speckle phantom with vessels and an analytic force-dependent deformation.

The tissue is a fixed rest raster. Pressing with force ``f`` squeezes each
vessel vertically and pushes the tissue down with a depth-decaying profile.
Frame ``f`` is rendered by sampling the rest raster along the backward map
``phi_f`` (frame-f pixel -> rest position), so ``phi_f - id`` is exactly the
field that warps the zero-force image onto the force-``f`` image.

Per-vessel squeeze (rest frame, relative to the vessel centre ``t0 = y0 - cy``)::

    y - cy = t0 * (s + (1 - s) * c(rho)),   s = max(1 - stiffness * f / 12, 0.1)

where ``rho`` is the elliptical radius of the rest point and ``c`` rises from
0 at the vessel wall to 1 two radii further out (smoothstep). The map is
monotone in ``t0`` for any ``s > 0``, so it can be inverted column-wise by
bisection. Inside the wall it is an exact scaling, so a vessel of vertical
radius ``b`` appears with radius ``b * s``.

Global tissue motion (backward form, pixels)::

    dy = -gain * f * (1 - y / H)
    dx = -bulge * gain * f * (x - xc) / (W / 2) * (1 - y / H)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DomainError, ValidationError
from .imagecore import BinaryMask, FrameRecord, Image, PathLike, save_image, save_mask, write_manifest
from .warp import DeformationField, sample_bilinear, write_field

F_SCALE_N = 12.0
MIN_SQUEEZE = 0.1
INFLUENCE = 2.0  # squeeze fades out over this many radii beyond the wall
_BISECT_STEPS = 60

_LCG_A = 6364136223846793005
_LCG_C = 1442695040888963407
_MASK64 = (1 << 64) - 1


def lcg_uniform(seed: int, n: int) -> np.ndarray:
    """``n`` uniforms in [0, 1) from the 64-bit LCG (MMIX constants), top 53 bits."""
    state = seed & _MASK64
    out = np.empty(n, dtype=np.float64)
    scale = 1.0 / (1 << 53)
    for i in range(n):
        state = (_LCG_A * state + _LCG_C) & _MASK64
        out[i] = (state >> 11) * scale
    return out


@dataclass(frozen=True)
class Vessel:
    cx: float
    cy: float
    a: float  # horizontal radius
    b: float  # vertical radius at rest
    intensity: float = 0.08
    stiffness: float = 1.0

    def squeeze(self, force: float) -> float:
        return max(1.0 - self.stiffness * force / F_SCALE_N, MIN_SQUEEZE)


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 128
    height: int = 128
    vessels: tuple = ()
    speckle_seed: int = 0
    compression_gain: float = 1.0
    lateral_bulge: float = 0.1
    tissue_level: float = 0.55
    speckle_contrast: float = 0.35
    speckle_sigma: float = 1.2

    def __post_init__(self):
        vessels = tuple(v if isinstance(v, Vessel) else Vessel(**v) for v in self.vessels)
        object.__setattr__(self, "vessels", vessels)
        if self.width < 16 or self.height < 16:
            raise ValidationError("phantom must be at least 16x16")
        if self.compression_gain <= 0:
            raise ValidationError("compression_gain must be > 0")
        if self.speckle_sigma <= 0:
            raise ValidationError("speckle_sigma must be > 0")
        for i, v in enumerate(vessels):
            if v.a <= 0 or v.b <= 0:
                raise ValidationError(f"vessel {i}: radii must be positive")
            if not 0.0 < v.stiffness <= 1.0:
                raise ValidationError(f"vessel {i}: stiffness must lie in (0, 1]")
            if not 0.0 <= v.intensity <= 1.0:
                raise ValidationError(f"vessel {i}: intensity must lie in [0, 1]")
            if v.cx - v.a < 0 or v.cx + v.a > self.width - 1 or v.cy - v.b < 0 or v.cy + v.b > self.height - 1:
                raise ValidationError(f"vessel {i} does not lie inside the {self.width}x{self.height} raster")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        if not isinstance(d, dict):
            raise ValidationError("phantom spec must be a JSON object")
        d = dict(d)
        try:
            d["vessels"] = tuple(Vessel(**v) for v in d.get("vessels", ()))
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"invalid phantom spec: {exc}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vessels"] = [asdict(v) for v in self.vessels]
        return d


def load_spec(path: PathLike) -> PhantomSpec:
    with open(path, encoding="utf-8") as fh:
        try:
            return PhantomSpec.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from None


def default_spec(seed: int = 0, size: int = 128, gain: float = 0.6) -> PhantomSpec:
    """An artery (stiff, round) and a vein (soft, oval) with seeded placement jitter."""
    j = lcg_uniform(seed ^ 0x9E3779B97F4A7C15, 4) - 0.5
    k = size / 128.0
    return PhantomSpec(
        width=size,
        height=size,
        vessels=(
            Vessel(cx=(42 + 8 * j[0]) * k, cy=(70 + 8 * j[1]) * k, a=10 * k, b=10 * k, intensity=0.10, stiffness=0.45),
            Vessel(cx=(88 + 8 * j[2]) * k, cy=(72 + 8 * j[3]) * k, a=13 * k, b=8 * k, intensity=0.06, stiffness=0.8),
        ),
        speckle_seed=seed,
        compression_gain=gain,
    )


# --- geometry --------------------------------------------------------------------


def _smoothstep(z):
    z = np.clip(z, 0.0, 1.0)
    return z * z * (3.0 - 2.0 * z)


def _squeeze_forward(v: Vessel, s: float, x0, y0):
    t0 = y0 - v.cy
    rho = np.sqrt(((x0 - v.cx) / v.a) ** 2 + (t0 / v.b) ** 2)
    c = _smoothstep((rho - 1.0) / INFLUENCE)
    return v.cy + t0 * (s + (1.0 - s) * c)


def _squeeze_inverse(v: Vessel, s: float, x, y):
    t = y - v.cy
    # |F(t0)| / |t0| lies in [s, 1], so the preimage is bracketed by t and t / s.
    lo = np.minimum(t, t / s)
    hi = np.maximum(t, t / s)
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        above = _squeeze_forward(v, s, x, v.cy + mid) - v.cy > t
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return v.cy + 0.5 * (lo + hi)


def _global_backward(spec: PhantomSpec, force: float, x, y):
    depth = 1.0 - y / spec.height
    g = spec.compression_gain * force
    xc = (spec.width - 1) / 2.0
    dx = -spec.lateral_bulge * g * (x - xc) / (spec.width / 2.0) * depth
    dy = -g * depth
    return x + dx, y + dy


def _global_forward(spec: PhantomSpec, force: float, xb, yb):
    g = spec.compression_gain * force
    y = (yb + g) / (1.0 + g / spec.height)
    depth = 1.0 - y / spec.height
    k = spec.lateral_bulge * g * depth / (spec.width / 2.0)
    xc = (spec.width - 1) / 2.0
    x = xc + (xb - xc) / (1.0 - k)
    return x, y


def backward_map(spec: PhantomSpec, force: float, x, y):
    """Rest-frame position of frame-``force`` points ``(x, y)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if force == 0:
        return x.copy(), y.copy()
    xb, yb = _global_backward(spec, force, x, y)
    for v in reversed(spec.vessels):
        yb = _squeeze_inverse(v, v.squeeze(force), xb, yb)
    return xb, yb


def forward_map(spec: PhantomSpec, force: float, x0, y0):
    """Frame-``force`` position of rest-frame points ``(x0, y0)``."""
    x = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y0, dtype=np.float64)
    if force == 0:
        return x.copy(), y.copy()
    for v in spec.vessels:
        y = _squeeze_forward(v, v.squeeze(force), x, y)
    return _global_forward(spec, force, x, y)


# --- rendering --------------------------------------------------------------------


def _grid(spec: PhantomSpec):
    ys, xs = np.mgrid[0 : spec.height, 0 : spec.width]
    return xs.astype(np.float64), ys.astype(np.float64)


def _inside(spec: PhantomSpec, x0, y0) -> np.ndarray:
    inside = np.zeros(x0.shape, dtype=bool)
    for v in spec.vessels:
        inside |= ((x0 - v.cx) / v.a) ** 2 + ((y0 - v.cy) / v.b) ** 2 <= 1.0
    return inside


def rest_raster(spec: PhantomSpec) -> np.ndarray:
    """Zero-force image: smoothed multiplicative speckle with dark vessels."""
    h, w = spec.height, spec.width
    noise = lcg_uniform(spec.speckle_seed, h * w).reshape(h, w)
    sp = gaussian_filter(noise, spec.speckle_sigma, mode="reflect")
    sp = (sp - sp.mean()) / sp.std()
    img = np.clip(spec.tissue_level * (1.0 + spec.speckle_contrast * sp), 0.0, 1.0)
    xs, ys = _grid(spec)
    for v in spec.vessels:
        rho = np.sqrt(((xs - v.cx) / v.a) ** 2 + ((ys - v.cy) / v.b) ** 2)
        # About one pixel of anti-aliasing across the wall.
        edge = np.clip(0.5 - (rho - 1.0) * min(v.a, v.b), 0.0, 1.0)
        lumen = np.clip(v.intensity * (1.0 + 0.3 * sp), 0.0, 1.0)
        img = img * (1.0 - edge) + lumen * edge
    return img


def render(spec: PhantomSpec, force: float):
    """Image, vessel mask and frame-to-rest field at ``force`` newtons."""
    if not np.isfinite(force) or force < 0:
        raise DomainError(f"force must be >= 0, got {force}")
    rest = rest_raster(spec)
    xs, ys = _grid(spec)
    x0, y0 = backward_map(spec, force, xs, ys)
    img = rest if force == 0 else sample_bilinear(rest, x0, y0)
    mask = _inside(spec, x0, y0).astype(np.uint8)
    return Image(img), BinaryMask(mask), DeformationField(x0 - xs, y0 - ys)


def pair_field(spec: PhantomSpec, f_ref: float, f_def: float) -> DeformationField:
    """Ground truth ``u`` with ``frame_ref(p + u(p)) = frame_def(p)``."""
    xs, ys = _grid(spec)
    x0, y0 = backward_map(spec, f_def, xs, ys)
    xr, yr = forward_map(spec, f_ref, x0, y0)
    return DeformationField(xr - xs, yr - ys)


@dataclass
class Sweep:
    forces: list
    images: list
    masks: list
    fields: list
    manifest: Optional[Path] = None
    records: list = field(default_factory=list)


def _tag(force: float) -> str:
    return f"{force:g}".replace(".", "p")


def render_sweep(spec: PhantomSpec, forces: Sequence[float], out_dir: Optional[PathLike] = None,
                 subject: Optional[str] = None) -> Sweep:
    """Render one frame per force; with ``out_dir`` also write PNGs, .udf fields and a manifest."""
    forces = [float(f) for f in forces]
    if not forces:
        raise DomainError("render_sweep needs at least one force")
    subject = subject or f"phantom-{spec.speckle_seed}"
    sweep = Sweep(forces, [], [], [])
    for f in forces:
        img, mask, fld = render(spec, f)
        sweep.images.append(img)
        sweep.masks.append(mask)
        sweep.fields.append(fld)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for f, img, mask, fld in zip(forces, sweep.images, sweep.masks, sweep.fields):
            stem = f"{subject}_f{_tag(f)}"
            save_image(img, out / f"{stem}.png")
            save_mask(mask, out / f"{stem}_mask.png")
            write_field(fld, out / f"{stem}_field.udf")
            sweep.records.append(FrameRecord(out / f"{stem}.png", f, subject, "palpation", out / f"{stem}_mask.png"))
        sweep.manifest = out / "manifest.jsonl"
        write_manifest(sweep.records, sweep.manifest)
        with open(out / "spec.json", "w", encoding="utf-8") as fh:
            json.dump(spec.to_dict(), fh, indent=2)
    return sweep
