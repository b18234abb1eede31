"""Coarse-to-fine variational registration.

The field is optimised directly: at each pyramid level, gradient descent with
momentum and backtracking on the configured loss, starting from the
upsampled (and doubled) field of the coarser level. The coarsest level starts
from zero, so results are deterministic.
"""

from __future__ import annotations

import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import NumericalError, ShapeError, ValidationError
from .imagecore import Image, as_array
from .losses import LossConfig, LossEval, Problem, compute_feature_maps
from .metrics import WINDOW_SIZE, pool2
from .warp import DeformationField, warp_image

log = logging.getLogger(__name__)

LEVEL_SCALE = 0.5
MIN_COARSE_SIDE = 2 * WINDOW_SIZE


@dataclass(frozen=True)
class SolverConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    pyramid_levels: int = 4
    iters_per_level: int = 150
    step_size: float = 10.0
    momentum: float = 0.9
    backtrack_factor: float = 0.5
    max_backtracks: int = 8
    converge_rel_tol: float = 1e-5
    converge_window: int = 10
    # Gaussian smoothing (in pixels of the current level) applied to the descent direction.
    precondition_sigma: float = 4.0

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValidationError("pyramid_levels must be >= 1")
        if self.iters_per_level < 0:
            raise ValidationError("iters_per_level must be >= 0")
        if self.step_size <= 0:
            raise ValidationError("step_size must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")
        if not 0.0 < self.backtrack_factor < 1.0:
            raise ValidationError("backtrack_factor must lie in (0, 1)")
        if self.precondition_sigma < 0:
            raise ValidationError("precondition_sigma must be >= 0")


@dataclass
class RegistrationResult:
    field: DeformationField
    final_loss: LossEval
    iterations_used: list
    reconstructed: Image
    loss_history: list = field(default_factory=list)
    aux_field: Optional[DeformationField] = None


def effective_levels(shape, requested: int) -> int:
    """Largest level count <= ``requested`` whose coarsest side is >= 22 px."""
    n = min(shape)
    levels = 1
    while levels < requested and n // 2**levels >= MIN_COARSE_SIDE:
        levels += 1
    return levels


def upsample_field(dx: np.ndarray, dy: np.ndarray, shape):
    """Bilinear upsampling to ``shape`` with displacements doubled."""
    h, w = dx.shape
    ys, xs = np.mgrid[0 : shape[0], 0 : shape[1]].astype(np.float64)
    xc = np.clip((xs + 0.5) * LEVEL_SCALE - 0.5, 0.0, w - 1.0)
    yc = np.clip((ys + 0.5) * LEVEL_SCALE - 0.5, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = xc - x0, yc - y0

    def interp(a):
        # Difference form keeps constant fields exact.
        top = a[y0, x0] + fx * (a[y0, x1] - a[y0, x0])
        bot = a[y1, x0] + fx * (a[y1, x1] - a[y1, x0])
        return (top + fy * (bot - top)) / LEVEL_SCALE

    return interp(dx), interp(dy)


def _pool_mask(m: np.ndarray) -> np.ndarray:
    h, w = (m.shape[0] // 2) * 2, (m.shape[1] // 2) * 2
    m = m[:h, :w]
    return np.maximum.reduce([m[0::2, 0::2], m[1::2, 0::2], m[0::2, 1::2], m[1::2, 1::2]])


class _Block:
    """Momentum/backtracking state for one field (``u_dr`` or ``u_rd``)."""

    def __init__(self, dx, dy, cfg: SolverConfig):
        self.dx, self.dy = dx, dy
        self.vx = np.zeros_like(dx)
        self.vy = np.zeros_like(dy)
        self.cfg = cfg
        self.step = cfg.step_size

    def direction(self, gdx, gdy):
        n = gdx.size
        gx, gy = gdx * n, gdy * n
        s = self.cfg.precondition_sigma
        if s > 0:
            gx = gaussian_filter(gx, s, mode="nearest")
            gy = gaussian_filter(gy, s, mode="nearest")
        return gx, gy

    def descend(self, loss: float, gdx, gdy, objective):
        """One accepted-or-rejected step; ``objective(dx, dy)`` returns ``(loss, payload)``.

        Returns ``(loss, payload)`` for an accepted step, ``None`` otherwise.
        """
        cfg = self.cfg
        gx, gy = self.direction(gdx, gdy)
        t = self.step
        tries = [(cfg.momentum * self.vx - t * gx, cfg.momentum * self.vy - t * gy, t)]
        for k in range(1, cfg.max_backtracks + 1):
            tk = t * cfg.backtrack_factor**k
            tries.append((-tk * gx, -tk * gy, tk))
        for sx, sy, tk in tries:
            cand_loss, payload = objective(self.dx + sx, self.dy + sy)
            if not math.isfinite(cand_loss):
                continue
            if cand_loss <= loss:
                self.dx, self.dy = self.dx + sx, self.dy + sy
                self.vx, self.vy = sx, sy
                self.step = min(cfg.step_size, 2.0 * tk)
                return cand_loss, payload
        self.vx = np.zeros_like(self.vx)
        self.vy = np.zeros_like(self.vy)
        # Restart the next iteration from the smallest step tried here.
        self.step = tries[-1][2]
        return None


def _converged(history, cfg: SolverConfig) -> bool:
    w = cfg.converge_window
    if len(history) <= w:
        return False
    old, new = history[-w - 1], history[-1]
    return old - new <= cfg.converge_rel_tol * max(abs(old), 1e-12)


def _check_finite(value: float, level: int, it: int):
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss at pyramid level {level}, iteration {it}")


def _solve_level(problem: Problem, dr, rd, cfg: SolverConfig, level: int):
    """Run descent on one level; returns fields, iterations and per-iteration totals."""
    block_dr = _Block(*dr, cfg)
    history = []
    if not problem.cyclic:
        t1 = problem.forward(block_dr.dx, block_dr.dy, grad=True)
        loss = t1.total
        _check_finite(loss, level, 0)
        history.append(loss)
        it = 0
        for it in range(1, cfg.iters_per_level + 1):
            res = block_dr.descend(loss, t1.gdx, t1.gdy,
                                   lambda x, y: (lambda r: (r.total, r))(problem.forward(x, y, grad=True)))
            if res is not None:
                loss, t1 = res
            _check_finite(loss, level, it)
            history.append(loss)
            if _converged(history, cfg):
                break
        return (block_dr.dx, block_dr.dy), None, it, history

    block_rd = _Block(*rd, cfg)
    t1 = problem.forward(block_dr.dx, block_dr.dy, grad=True)
    t2 = problem.backward(t1.recon, block_rd.dx, block_rd.dy, grad=True)
    loss = t1.total + t2.total
    _check_finite(loss, level, 0)
    history.append(loss)

    def obj_dr(x, y):
        a = problem.forward(x, y, grad=True)
        b = problem.backward(a.recon, block_rd.dx, block_rd.dy, grad=True)
        return a.total + b.total, (a, b)

    it = 0
    for it in range(1, cfg.iters_per_level + 1):
        res = block_dr.descend(loss, t1.gdx, t1.gdy, obj_dr)
        if res is not None:
            loss, (t1, t2) = res
        recon = t1.recon

        def obj_rd(x, y):
            b = problem.backward(recon, x, y, grad=True)
            return t1.total + b.total, b

        res = block_rd.descend(loss, t2.gdx, t2.gdy, obj_rd)
        if res is not None:
            loss, t2 = res
        _check_finite(loss, level, it)
        history.append(loss)
        if _converged(history, cfg):
            break
    return (block_dr.dx, block_dr.dy), (block_rd.dx, block_rd.dy), it, history


def register(deformed, reference, cfg: SolverConfig = SolverConfig(), feature_maps=None) -> RegistrationResult:
    """Estimate ``u_dr`` such that ``warp(u_dr, reference)`` matches ``deformed``.

    ``feature_maps`` optionally supplies ``(map of deformed, map of reference)``
    for the feature-aware loss; otherwise they are detected at full resolution
    and max-pooled down the pyramid.
    """
    d_full, r_full = as_array(deformed), as_array(reference)
    if d_full.shape != r_full.shape:
        raise ShapeError(
            f"deformed image is {d_full.shape[1]}x{d_full.shape[0]} but reference is "
            f"{r_full.shape[1]}x{r_full.shape[0]}"
        )
    if min(d_full.shape) < WINDOW_SIZE:
        raise ShapeError(f"images must be at least {WINDOW_SIZE}x{WINDOW_SIZE} to register")
    levels = effective_levels(d_full.shape, cfg.pyramid_levels)
    pyr_d, pyr_r = [d_full], [r_full]
    for _ in range(levels - 1):
        pyr_d.append(pool2(pyr_d[-1]))
        pyr_r.append(pool2(pyr_r[-1]))

    masks = None
    if cfg.loss.variant == "fa_cyclic":
        if feature_maps is None:
            md, mr = compute_feature_maps(r_full, d_full, cfg.loss)
        else:
            md, mr = (as_array(m) for m in feature_maps)
        masks = [(md, mr)]
        for _ in range(levels - 1):
            masks.append((_pool_mask(masks[-1][0]), _pool_mask(masks[-1][1])))

    dr = rd = None
    iterations, history = [], []
    for lvl in range(levels - 1, -1, -1):
        shape = pyr_d[lvl].shape
        if dr is None:
            dr = (np.zeros(shape), np.zeros(shape))
            rd = (np.zeros(shape), np.zeros(shape))
        else:
            dr = upsample_field(*dr, shape)
            rd = upsample_field(*rd, shape)
        lcfg = cfg.loss.fitted_to(shape)
        problem = Problem(pyr_r[lvl], pyr_d[lvl], lcfg, masks[lvl] if masks else None)
        dr, rd_new, used, hist = _solve_level(problem, dr, rd, cfg, lvl)
        if rd_new is not None:
            rd = rd_new
        iterations.append(used)
        history.append(hist)
        log.debug("level %d (%dx%d): %d iterations, loss %.6g -> %.6g", lvl, shape[1], shape[0], used, hist[0], hist[-1])

    # Store at the precision of the .udf format so written fields round-trip exactly.
    u_dr = DeformationField(dr[0], dr[1]).as_float32()
    u_rd = DeformationField(rd[0], rd[1]).as_float32()
    full_problem = Problem(r_full, d_full, cfg.loss.fitted_to(d_full.shape), masks[0] if masks else None)
    final = full_problem.evaluate((u_dr.dx, u_dr.dy), (u_rd.dx, u_rd.dy), grad=True)
    recon = warp_image(u_dr, Image(r_full))
    return RegistrationResult(u_dr, final, iterations[::-1], recon, history, u_rd if full_problem.cyclic else None)


def self_register(img, cfg: SolverConfig = SolverConfig()) -> RegistrationResult:
    return register(img, img, cfg)


def bench_register(size: int, cfg: SolverConfig = SolverConfig(), repetitions: int = 3, seed: int = 0) -> dict:
    """Time registrations of a phantom 2 N / 10 N pair of ``size`` x ``size`` pixels."""
    from .phantom import default_spec, render

    report = {"size": size, "repetitions": repetitions, "loss": cfg.loss.variant, "times_s": []}
    if repetitions <= 0:
        report.update(mean_s=None, median_s=None, total_s=0.0, hz=None)
        return report
    spec = default_spec(seed, size)
    ref = render(spec, 2.0)[0]
    dfm = render(spec, 10.0)[0]
    times = []
    total_start = time.perf_counter()
    for _ in range(repetitions):
        t0 = time.perf_counter()
        register(dfm, ref, cfg)
        times.append(time.perf_counter() - t0)
    total = time.perf_counter() - total_start
    mean = statistics.fmean(times)
    report.update(
        times_s=times,
        mean_s=mean,
        median_s=statistics.median(times),
        total_s=total,
        hz=1.0 / mean if mean > 0 else math.inf,
    )
    return report
