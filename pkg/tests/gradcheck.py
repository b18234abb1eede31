"""Central finite-difference checks of the block gradients of every loss variant."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from oracles import kinkfree_field
from sonoreg.losses import LossConfig, loss_grad
from sonoreg.warp import DeformationField

H = 1e-3


def instance(variant, seed, n=16):
    """Random smooth image pair, kink-free fields and (for fa_cyclic) blob masks."""
    rng = np.random.default_rng(seed)
    ref = np.clip(gaussian_filter(rng.random((n, n)), 1.0) * 3 - 1, 0, 1)
    dfm = np.clip(np.roll(ref, 1, axis=1) + 0.05 * rng.standard_normal((n, n)), 0, 1)
    dr = DeformationField(*kinkfree_field(rng, n, n))
    rd = DeformationField(*kinkfree_field(rng, n, n))
    cfg = LossConfig(beta=float(rng.uniform(0.2, 0.95)), variant=variant).fitted_to((n, n))
    maps = None
    if cfg.variant == "fa_cyclic":
        ys, xs = np.mgrid[0:n, 0:n]
        maps = tuple(
            ((xs - rng.uniform(3, n - 3)) ** 2 + (ys - rng.uniform(3, n - 3)) ** 2 <= rng.uniform(16, 40)).astype(float)
            for _ in range(2)
        )
    return rng, ref, dfm, dr, rd, cfg, maps


def _term(ref, dfm, dr, rd, cfg, maps, k):
    return loss_grad(ref, dfm, dr, rd, cfg, maps, grad=False).terms[k]


def _shift(u, dx, dy, s):
    return DeformationField(u.dx + s * dx, u.dy + s * dy)


def directional_errors(variant, seed, directions=3):
    """Relative errors of directional derivatives for each gradient block."""
    rng, ref, dfm, dr, rd, cfg, maps = instance(variant, seed)
    ev = loss_grad(ref, dfm, dr, rd, cfg, maps)
    errs = []
    blocks = [("dr", ev.grad_u_dr, 0)]
    if ev.grad_u_rd is not None:
        blocks.append(("rd", ev.grad_u_rd, 1))
    for name, g, k in blocks:
        for _ in range(directions):
            ddx, ddy = rng.standard_normal(ref.shape), rng.standard_normal(ref.shape)
            if name == "dr":
                fp = _term(ref, dfm, _shift(dr, ddx, ddy, H), rd, cfg, maps, k)
                fm = _term(ref, dfm, _shift(dr, ddx, ddy, -H), rd, cfg, maps, k)
            else:
                fp = _term(ref, dfm, dr, _shift(rd, ddx, ddy, H), cfg, maps, k)
                fm = _term(ref, dfm, dr, _shift(rd, ddx, ddy, -H), cfg, maps, k)
            fd = (fp - fm) / (2 * H)
            an = float(np.sum(g.dx * ddx) + np.sum(g.dy * ddy))
            errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-300))
    return errs


def all_component_errors(variant, seed):
    """Relative error of every gradient component of every block of one instance."""
    _, ref, dfm, dr, rd, cfg, maps = instance(variant, seed)
    ev = loss_grad(ref, dfm, dr, rd, cfg, maps)
    blocks = [("dr", ev.grad_u_dr, 0)]
    if ev.grad_u_rd is not None:
        blocks.append(("rd", ev.grad_u_rd, 1))
    errs = []
    for name, g, k in blocks:
        for comp, garr in ((0, g.dx), (1, g.dy)):
            for (i, j), an in np.ndenumerate(garr):
                e = np.zeros(ref.shape)
                e[i, j] = 1.0
                ex, ey = (e, 0 * e) if comp == 0 else (0 * e, e)
                if name == "dr":
                    fp = _term(ref, dfm, _shift(dr, ex, ey, H), rd, cfg, maps, k)
                    fm = _term(ref, dfm, _shift(dr, ex, ey, -H), rd, cfg, maps, k)
                else:
                    fp = _term(ref, dfm, dr, _shift(rd, ex, ey, H), cfg, maps, k)
                    fm = _term(ref, dfm, dr, _shift(rd, ex, ey, -H), cfg, maps, k)
                fd = (fp - fm) / (2 * H)
                errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-300))
    return errs
