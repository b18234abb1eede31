"""Image-quality and evaluation metrics.

SSIM uses an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03 and dynamic
range 1, averaged over the valid (unpadded) window positions. The gradient
helpers here are what the registration losses differentiate through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeError, ValidationError
from .imagecore import as_array

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03
C1 = K1**2
C2 = K2**2
MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MAX_SCALES = 3


def gaussian_kernel1d(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    r = size // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(t**2) / (2.0 * sigma**2))
    return k / k.sum()


_KERNEL = gaussian_kernel1d()


def filter_valid(x: np.ndarray, k: np.ndarray = _KERNEL) -> np.ndarray:
    """Separable correlation keeping only fully-covered window positions.

    Works on a single (H, W) map or a stack (N, H, W) filtered map by map.
    """
    r = len(k) // 2
    y = correlate1d(x, k, axis=-2, mode="constant")
    y = correlate1d(y, k, axis=-1, mode="constant")
    return y[..., r:-r, r:-r]


def filter_valid_adjoint(g: np.ndarray, k: np.ndarray = _KERNEL) -> np.ndarray:
    """Adjoint of :func:`filter_valid`: a full convolution back to input size."""
    r = len(k) // 2
    pad = [(0, 0)] * (g.ndim - 2) + [(r, r), (r, r)]
    y = np.pad(g, pad)
    y = correlate1d(y, k[::-1], axis=-2, mode="constant")
    return correlate1d(y, k[::-1], axis=-1, mode="constant")


def pool2(x: np.ndarray) -> np.ndarray:
    """2x2 mean pooling; an odd trailing row/column is dropped."""
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def pool2_adjoint(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape)
    up = 0.25 * np.repeat(np.repeat(g, 2, axis=0), 2, axis=1)
    out[: up.shape[0], : up.shape[1]] = up
    return out


def _check_pair(a: np.ndarray, b: np.ndarray, min_side: int = 0) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape[1]}x{a.shape[0]} vs {b.shape[1]}x{b.shape[0]}")
    if min(a.shape) < min_side:
        raise ShapeError(f"image {a.shape[1]}x{a.shape[0]} is smaller than the required {min_side}x{min_side}")


def _ssim_terms(a: np.ndarray, b: np.ndarray, want_grad: bool, structure_only: bool):
    """Mean of the SSIM map (or contrast-structure map) and its gradient w.r.t. ``b``."""
    mu_a, mu_b, s_aa, s_bb, s_ab = filter_valid(np.stack([a, b, a * a, b * b, a * b]))
    var_a = s_aa - mu_a * mu_a
    var_b = s_bb - mu_b * mu_b
    cov = s_ab - mu_a * mu_b
    a2 = 2.0 * cov + C2
    b2 = var_a + var_b + C2
    cs = a2 / b2
    if structure_only:
        smap = cs
    else:
        a1 = 2.0 * mu_a * mu_b + C1
        b1 = mu_a * mu_a + mu_b * mu_b + C1
        lum = a1 / b1
        smap = lum * cs
    value = float(smap.mean())
    if not want_grad:
        return value, None
    n = smap.size
    if structure_only:
        g_mu = (-2.0 * mu_a + 2.0 * mu_b * cs) / b2
        g_bb = -cs / b2
        g_ab = 2.0 / b2
    else:
        g_mu = (2.0 * mu_a * cs - 2.0 * mu_b * smap) / b1 + (-2.0 * mu_a * lum + 2.0 * mu_b * smap) / b2
        g_bb = -smap / b2
        g_ab = 2.0 * lum / b2
    f_mu, f_bb, f_ab = filter_valid_adjoint(np.stack([g_mu, g_bb, g_ab]) / n)
    grad = f_mu + 2.0 * b * f_bb + a * f_ab
    return value, grad


def ssim_array(a: np.ndarray, b: np.ndarray, grad: bool = False):
    _check_pair(a, b, WINDOW_SIZE)
    value, g = _ssim_terms(a, b, grad, structure_only=False)
    return (value, g) if grad else value


def ms_weights(scales: int) -> np.ndarray:
    w = np.asarray(MS_WEIGHTS[:scales], dtype=np.float64)
    return w / w.sum()


def ms_min_side(scales: int) -> int:
    return WINDOW_SIZE * 2 ** (scales - 1)


def ms_ssim_array(a: np.ndarray, b: np.ndarray, scales: int = MAX_SCALES, grad: bool = False):
    """Multi-scale SSIM and optionally its gradient with respect to ``b``.

    Contrast-structure terms at the finer scales and the full SSIM term at the
    coarsest scale are combined as a weighted geometric mean. Non-positive
    terms are floored at zero (their power is undefined) and contribute no
    gradient. With one scale this is exactly :func:`ssim_array`.
    """
    if scales not in range(1, MAX_SCALES + 1):
        raise ValidationError(f"scales must be in 1..{MAX_SCALES}, got {scales}")
    _check_pair(a, b, ms_min_side(scales))
    if scales == 1:
        return ssim_array(a, b, grad=grad)
    weights = ms_weights(scales)
    pa, pb = [a], [b]
    for _ in range(scales - 1):
        pa.append(pool2(pa[-1]))
        pb.append(pool2(pb[-1]))
    terms, grads = [], []
    for j in range(scales):
        t, g = _ssim_terms(pa[j], pb[j], grad, structure_only=j < scales - 1)
        terms.append(t)
        grads.append(g)
    clipped = [max(t, 0.0) for t in terms]
    value = float(np.prod([c**w for c, w in zip(clipped, weights)]))
    if not grad:
        return value
    total = np.zeros_like(pb[-1])
    # Walk coarse to fine, accumulating d(value)/d(b_j) and pushing it through pooling.
    for j in range(scales - 1, -1, -1):
        if j < scales - 1:
            total = pool2_adjoint(total, pb[j].shape)
        if terms[j] > 0.0 and value > 0.0:
            total = total + (weights[j] * value / terms[j]) * grads[j]
    return value, total


# --- public metrics ----------------------------------------------------------


@dataclass
class MetricReport:
    name: str
    value: float
    per_scale: Optional[list] = field(default=None)

    def to_json(self) -> dict:
        # JSON has no infinity literal; PSNR of identical images is reported as "inf".
        value = self.value
        if isinstance(value, float) and math.isinf(value):
            value = "inf" if value > 0 else "-inf"
        out = {"name": self.name, "value": value}
        if self.per_scale is not None:
            out["per_scale"] = list(self.per_scale)
        return out


def ssim(a, b) -> float:
    return ssim_array(as_array(a), as_array(b))


def ms_ssim(a, b, scales: int = MAX_SCALES) -> float:
    return ms_ssim_array(as_array(a), as_array(b), scales)


def ms_ssim_per_scale(a, b, scales: int = MAX_SCALES) -> list[float]:
    """The raw per-scale terms (contrast-structure, then full SSIM at the coarsest)."""
    a, b = as_array(a), as_array(b)
    _check_pair(a, b, ms_min_side(scales))
    out = []
    for j in range(scales):
        out.append(_ssim_terms(a, b, False, structure_only=j < scales - 1)[0])
        a, b = pool2(a), pool2(b)
    return out


def psnr(a, b) -> float:
    """PSNR in dB with peak 1.0; identical images give ``math.inf``."""
    a, b = as_array(a), as_array(b)
    _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def f_ssim(a, b, mask) -> float:
    """SSIM after multiplying both images by a binary feature map."""
    a, b, m = as_array(a), as_array(b), as_array(mask)
    _check_pair(a, b)
    _check_pair(a, m)
    return ssim_array(a * m, b * m)


def iou(a, b) -> float:
    a, b = as_array(a) > 0, as_array(b) > 0
    _check_pair(a, b)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def endpoint_error(u, v) -> float:
    """Mean Euclidean distance between two displacement fields."""
    if u.shape != v.shape:
        raise ShapeError(f"field dimensions differ: {u.shape} vs {v.shape}")
    return float(np.mean(np.hypot(u.dx - v.dx, u.dy - v.dy)))
