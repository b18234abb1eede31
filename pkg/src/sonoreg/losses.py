"""Unsupervised registration objectives and their analytic gradients.

Three variants are supported:

``us``
    ``beta * (1 - MS-SSIM(I_d, I_d')) + (1 - beta) * smooth(u_dr)`` with
    ``I_d' = warp(u_dr, I_r)``.
``cyclic``
    The ``us`` term plus the same objective for registering ``I_r`` back onto
    the reconstruction: ``I_r' = warp(u_rd, I_d')``.
``fa_cyclic``
    ``cyclic`` evaluated on images multiplied by binary keypoint maps. The map
    of ``I_d`` masks the ``(I_d, I_d')`` pair and the map of ``I_r`` masks the
    ``(I_r, I_r')`` pair; maps are computed once from the real images.

Gradients follow a block rule for the cyclic variants: the ``u_dr`` gradient
comes from the first term only, the ``u_rd`` gradient from the second term
with ``I_d'`` held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .errors import ShapeError, ValidationError
from .features import DEFAULT_RADIUS, DetectorSettings, feature_map
from .imagecore import as_array
from .metrics import MAX_SCALES, ms_min_side, ms_ssim_array
from .warp import DeformationField, warp_array

VARIANTS = ("us", "cyclic", "fa_cyclic")


def normalize_variant(name: str) -> str:
    v = name.replace("-", "_").lower()
    if v == "fa_cyclic_us":
        v = "fa_cyclic"
    if v == "cyclic_us":
        v = "cyclic"
    if v not in VARIANTS:
        raise ValidationError(f"unknown loss variant {name!r}; choose from us, cyclic, fa-cyclic")
    return v


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.85
    ms_scales: int = MAX_SCALES
    feature_radius: float = DEFAULT_RADIUS
    variant: str = "us"
    detector: DetectorSettings = field(default_factory=DetectorSettings)

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValidationError(f"beta must lie in [0, 1], got {self.beta}")
        if self.ms_scales not in range(1, MAX_SCALES + 1):
            raise ValidationError(f"ms_scales must be in 1..{MAX_SCALES}, got {self.ms_scales}")
        if self.feature_radius < 1:
            raise ValidationError("feature_radius must be >= 1")
        object.__setattr__(self, "variant", normalize_variant(self.variant))

    def fitted_to(self, shape) -> "LossConfig":
        """Same config with MS-SSIM depth reduced until ``shape`` supports it."""
        scales = self.ms_scales
        while scales > 1 and min(shape) < ms_min_side(scales):
            scales -= 1
        return self if scales == self.ms_scales else replace(self, ms_scales=scales)


@dataclass(frozen=True)
class LossEval:
    total: float
    ssim_term: float
    smooth_term: float
    grad_u_dr: Optional[DeformationField] = None
    grad_u_rd: Optional[DeformationField] = None
    # Per-term totals: (forward,) for ``us``, (forward, backward) for cyclic variants.
    terms: tuple = ()


# --- smoothness --------------------------------------------------------------


def laplacian(u: np.ndarray) -> np.ndarray:
    """Five-point Laplacian with replicate-border padding."""
    p = np.pad(u, 1, mode="edge")
    return p[1:-1, 2:] + p[1:-1, :-2] + p[2:, 1:-1] + p[:-2, 1:-1] - 4.0 * u


def laplacian_adjoint(g: np.ndarray) -> np.ndarray:
    out = -4.0 * g
    out[:, 1:] += g[:, :-1]
    out[:, -1] += g[:, -1]
    out[:, :-1] += g[:, 1:]
    out[:, 0] += g[:, 0]
    out[1:, :] += g[:-1, :]
    out[-1, :] += g[-1, :]
    out[:-1, :] += g[1:, :]
    out[0, :] += g[0, :]
    return out


def smooth_array(dx: np.ndarray, dy: np.ndarray, grad: bool = False):
    """Mean squared Laplacian over pixels and both displacement components."""
    lx, ly = laplacian(dx), laplacian(dy)
    n = 2 * dx.size
    value = float((np.sum(lx * lx) + np.sum(ly * ly)) / n)
    if not grad:
        return value
    return value, laplacian_adjoint(lx) * (2.0 / n), laplacian_adjoint(ly) * (2.0 / n)


def smooth_loss(u: DeformationField) -> float:
    if u.height < 3 or u.width < 3:
        raise ShapeError(f"smoothness needs a field of at least 3x3, got {u.width}x{u.height}")
    return smooth_array(u.dx, u.dy)


def ssim_loss(a, b, cfg: LossConfig = LossConfig()) -> float:
    return 1.0 - ms_ssim_array(as_array(a), as_array(b), cfg.ms_scales)


def loss_us(I_d, I_d_rec, u: DeformationField, cfg: LossConfig = LossConfig()) -> float:
    return cfg.beta * ssim_loss(I_d, I_d_rec, cfg) + (1.0 - cfg.beta) * smooth_loss(u)


# --- array-level evaluation used by the solver ----------------------------------


class TermResult(NamedTuple):
    total: float
    ssim_term: float
    smooth_term: float
    recon: np.ndarray
    gdx: Optional[np.ndarray]
    gdy: Optional[np.ndarray]


def us_term(target, source, dx, dy, beta, scales, mask=None, grad=False) -> TermResult:
    """One ``us`` term: compare ``target`` with ``warp((dx, dy), source)``.

    ``mask`` (if given) multiplies both compared images. ``recon`` is the
    unmasked warped source.
    """
    if grad:
        recon, wx, wy = warp_array(dx, dy, source, grad=True)
    else:
        recon = warp_array(dx, dy, source)
    if mask is not None:
        t, r = target * mask, recon * mask
    else:
        t, r = target, recon
    if grad:
        ms, g_r = ms_ssim_array(t, r, scales, grad=True)
        sm, gsx, gsy = smooth_array(dx, dy, grad=True)
    else:
        ms = ms_ssim_array(t, r, scales)
        sm = smooth_array(dx, dy)
    l_ssim = 1.0 - ms
    total = beta * l_ssim + (1.0 - beta) * sm
    if not grad:
        return TermResult(total, l_ssim, sm, recon, None, None)
    g_recon = -beta * g_r
    if mask is not None:
        g_recon = g_recon * mask
    gdx = g_recon * wx + (1.0 - beta) * gsx
    gdy = g_recon * wy + (1.0 - beta) * gsy
    return TermResult(total, l_ssim, sm, recon, gdx, gdy)


class Problem:
    """Reference/deformed arrays plus the configuration for one registration.

    ``masks`` is ``(mask_deformed, mask_reference)`` for ``fa_cyclic``.
    """

    def __init__(self, reference: np.ndarray, deformed: np.ndarray, cfg: LossConfig, masks=None):
        if reference.shape != deformed.shape:
            raise ShapeError(
                f"reference {reference.shape[1]}x{reference.shape[0]} and deformed "
                f"{deformed.shape[1]}x{deformed.shape[0]} differ"
            )
        self.reference = reference
        self.deformed = deformed
        self.cfg = cfg
        self.cyclic = cfg.variant in ("cyclic", "fa_cyclic")
        if cfg.variant == "fa_cyclic" and masks is None:
            raise ValidationError("fa_cyclic needs feature maps")
        self.mask_d, self.mask_r = masks if cfg.variant == "fa_cyclic" else (None, None)

    def forward(self, dx, dy, grad=False) -> TermResult:
        c = self.cfg
        return us_term(self.deformed, self.reference, dx, dy, c.beta, c.ms_scales, self.mask_d, grad)

    def backward(self, recon_d, dx, dy, grad=False) -> TermResult:
        c = self.cfg
        return us_term(self.reference, recon_d, dx, dy, c.beta, c.ms_scales, self.mask_r, grad)

    def evaluate(self, dr, rd=None, grad=True) -> LossEval:
        t1 = self.forward(*dr, grad=grad)
        g_dr = DeformationField(t1.gdx, t1.gdy) if grad else None
        if not self.cyclic:
            return LossEval(t1.total, t1.ssim_term, t1.smooth_term, g_dr, None, (t1.total,))
        if rd is None:
            rd = (np.zeros_like(dr[0]), np.zeros_like(dr[1]))
        t2 = self.backward(t1.recon, *rd, grad=grad)
        g_rd = DeformationField(t2.gdx, t2.gdy) if grad else None
        return LossEval(
            t1.total + t2.total,
            t1.ssim_term + t2.ssim_term,
            t1.smooth_term + t2.smooth_term,
            g_dr,
            g_rd,
            (t1.total, t2.total),
        )


def compute_feature_maps(reference, deformed, cfg: LossConfig):
    """Keypoint maps ``(map of I_d, map of I_r)`` as float arrays."""
    detector = cfg.detector
    md = feature_map(deformed, cfg.feature_radius, detector).data.astype(np.float64)
    mr = feature_map(reference, cfg.feature_radius, detector).data.astype(np.float64)
    return md, mr


def _fields(u_dr, u_rd, shape):
    if u_dr.shape != shape:
        raise ShapeError(f"field {u_dr.shape} does not match images {shape}")
    dr = (u_dr.dx, u_dr.dy)
    rd = None
    if u_rd is not None:
        if u_rd.shape != shape:
            raise ShapeError(f"field {u_rd.shape} does not match images {shape}")
        rd = (u_rd.dx, u_rd.dy)
    return dr, rd


def loss_grad(
    I_r,
    I_d,
    u_dr: DeformationField,
    u_rd: Optional[DeformationField] = None,
    cfg: LossConfig = LossConfig(),
    feature_maps=None,
    grad: bool = True,
) -> LossEval:
    """Evaluate ``cfg.variant`` and (by default) its block gradients.

    ``feature_maps`` overrides the detected ``(map of I_d, map of I_r)`` pair
    for ``fa_cyclic``.
    """
    ref, dfm = as_array(I_r), as_array(I_d)
    masks = None
    if cfg.variant == "fa_cyclic":
        if feature_maps is None:
            masks = compute_feature_maps(ref, dfm, cfg)
        else:
            masks = tuple(as_array(m) for m in feature_maps)
    problem = Problem(ref, dfm, cfg, masks)
    dr, rd = _fields(u_dr, u_rd, ref.shape)
    return problem.evaluate(dr, rd, grad=grad)


def loss_cyclic(I_r, I_d, u_dr, u_rd, cfg: LossConfig = LossConfig()) -> LossEval:
    return loss_grad(I_r, I_d, u_dr, u_rd, replace(cfg, variant="cyclic"))


def loss_fa_cyclic(I_r, I_d, u_dr, u_rd, cfg: LossConfig = LossConfig(), feature_maps=None) -> LossEval:
    return loss_grad(I_r, I_d, u_dr, u_rd, replace(cfg, variant="fa_cyclic"), feature_maps)
