"""Acceptance gate: nine criteria, each at its stated tolerance and time budget.

Run with ``pytest tests/test_acceptance.py -v`` (a PASS/FAIL line per criterion
is printed in the terminal summary) or directly with
``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import functools
import statistics
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gradcheck import all_component_errors  # noqa: E402
from oracles import warp_bruteforce  # noqa: E402
from sonoreg.imagecore import Image, load_manifest, read_raster_u8  # noqa: E402
from sonoreg.losses import LossConfig, loss_cyclic, loss_fa_cyclic, loss_us, smooth_loss, ssim_loss  # noqa: E402
from sonoreg.metrics import endpoint_error, psnr, ssim  # noqa: E402
from sonoreg.phantom import default_spec, pair_field, render, render_sweep  # noqa: E402
from sonoreg.solver import SolverConfig, bench_register, register  # noqa: E402
from sonoreg.synth import InterpolationSpec, augment_dataset, interpolate_field, synthesize  # noqa: E402
from sonoreg.warp import DeformationField, field_lincomb, read_field, warp_array, warp_image  # noqa: E402

RESULTS: dict[int, tuple[bool, str]] = {}
TITLES = {
    1: "warp identities",
    2: "gradient correctness",
    3: "loss algebra",
    4: "phantom registration accuracy",
    5: "synthesis endpoints and linearity",
    6: "PSNR ceiling",
    7: "augmentation pipeline",
    8: "determinism",
    9: "throughput report",
}
VARIANTS = ("us", "cyclic", "fa_cyclic")
PHANTOM_SEEDS = range(10)
F_REF, F_DEF = 2.0, 10.0
REFERENCE_HZ = 33.0


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (bool(ok), detail)
    print(summary_line(n))


def summary_line(n: int) -> str:
    ok, detail = RESULTS[n]
    return f"[{'PASS' if ok else 'FAIL'}] {n}. {TITLES[n]}: {detail}"


def summary_lines() -> list[str]:
    return [summary_line(n) for n in sorted(RESULTS)]


@functools.lru_cache(maxsize=None)
def phantom_case(seed: int):
    spec = default_spec(seed)
    ref, ref_mask, _ = render(spec, F_REF)
    dfm = render(spec, F_DEF)[0]
    return spec, ref, ref_mask, dfm, pair_field(spec, F_REF, F_DEF)


@functools.lru_cache(maxsize=None)
def solved(seed: int, variant: str):
    _, ref, _, dfm, _ = phantom_case(seed)
    return register(dfm, ref, SolverConfig(loss=LossConfig(variant=variant)))


# --- 1 ----------------------------------------------------------------------------


def check_warp():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    exact = True
    worst = 0.0
    for _ in range(200):
        h, w = rng.integers(2, 17, size=2)
        src = rng.random((h, w))
        exact &= bool(np.array_equal(warp_image(DeformationField.zeros(h, w), Image(src)).data, src))
        amp = rng.uniform(0, min(4.0, max(h, w)))
        dx, dy = rng.uniform(-amp, amp, (h, w)), rng.uniform(-amp, amp, (h, w))
        worst = max(worst, float(np.max(np.abs(warp_array(dx, dy, src) - warp_bruteforce(src, dx, dy)))))
    dt = time.perf_counter() - t0
    ok = exact and worst <= 1e-6 and dt < 10
    return ok, f"zero-field exact={exact}, max |bilinear - oracle|={worst:.1e} (<=1e-6), {dt:.1f}s (<10s)"


# --- 2 ----------------------------------------------------------------------------


def check_gradients():
    t0 = time.perf_counter()
    worst = {}
    for v in VARIANTS:
        worst[v] = max(max(all_component_errors(v, seed)) for seed in range(20))
    dt = time.perf_counter() - t0
    ok = all(e < 1e-3 for e in worst.values()) and dt < 120
    parts = ", ".join(f"{v} {e:.1e}" for v, e in worst.items())
    return ok, f"max relative error over 20 instances x all components: {parts} (<1e-3), {dt:.0f}s (<120s)"


# --- 3 ----------------------------------------------------------------------------


def check_loss_algebra():
    from scipy.ndimage import gaussian_filter

    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(300 + seed)
        ref = Image(np.clip(gaussian_filter(rng.random((48, 48)), 1.2) * 3 - 1, 0, 1))
        dfm = Image(np.clip(np.roll(ref.data, 2, axis=0) + 0.03 * rng.standard_normal((48, 48)), 0, 1))
        mk = lambda: DeformationField(*(4 * gaussian_filter(rng.standard_normal((48, 48)), 4) for _ in range(2)))
        u_dr, u_rd = mk(), mk()
        rec_d = warp_image(u_dr, ref)
        rec_r = warp_image(u_rd, rec_d)
        diffs = [
            loss_us(dfm, rec_d, u_dr, LossConfig(beta=1.0)) - ssim_loss(dfm, rec_d),
            loss_us(dfm, rec_d, u_dr, LossConfig(beta=0.0)) - smooth_loss(u_dr),
            loss_cyclic(ref, dfm, u_dr, u_rd).total - (loss_us(dfm, rec_d, u_dr) + loss_us(ref, rec_r, u_rd)),
            loss_fa_cyclic(ref, dfm, u_dr, u_rd, feature_maps=(np.ones((48, 48)),) * 2).total
            - loss_cyclic(ref, dfm, u_dr, u_rd).total,
        ]
        worst = max(worst, max(abs(d) for d in diffs))
    return worst <= 1e-12, f"max deviation over beta endpoints, cyclic sum, all-ones fa-cyclic: {worst:.1e} (<=1e-12)"


# --- 4 ----------------------------------------------------------------------------


def check_phantom_accuracy():
    t0 = time.perf_counter()
    max_disp = max(float(phantom_case(s)[4].magnitude().max()) for s in PHANTOM_SEEDS)
    stats = {}
    for v in VARIANTS:
        epe, sims = [], []
        for s in PHANTOM_SEEDS:
            _, ref, _, dfm, truth = phantom_case(s)
            res = solved(s, v)
            epe.append(endpoint_error(res.field, truth))
            sims.append(ssim(dfm, res.reconstructed))
        stats[v] = (statistics.fmean(epe), max(epe), min(sims), statistics.fmean(sims))
    dt = time.perf_counter() - t0
    ok = max_disp <= 8.0 and dt < 600
    ok &= all(mean_epe <= 1.0 and min_ssim >= 0.90 for mean_epe, _, min_ssim, _ in stats.values())
    order = sorted(VARIANTS, key=lambda v: -stats[v][3])
    parts = "; ".join(
        f"{v}: mean EPE {m:.3f} (max {mx:.3f}) px, SSIM min {mn:.4f} mean {av:.4f}" for v, (m, mx, mn, av) in stats.items()
    )
    trend = " >= ".join(order)
    return ok, (f"max |u_gt| {max_disp:.2f} px (<=8); {parts}; thresholds EPE<=1.0, SSIM>=0.90; "
                f"observed SSIM order {trend} (reference trend fa_cyclic >= cyclic >= us, not asserted); "
                f"{dt:.0f}s (<600s)")


# --- 5 ----------------------------------------------------------------------------


def check_synthesis():
    spec, ref, ref_mask, _, _ = phantom_case(0)
    res = solved(0, "us")
    zero = DeformationField.zeros(*ref.shape)
    ispec = InterpolationSpec(F_REF, F_DEF, (F_REF, 4.0, 6.0, 8.0, F_DEF))
    frames = synthesize(ref, ref_mask, zero, res.field, ispec)
    ref_exact = frames[0].image == ref
    def_exact = frames[-1].image == res.reconstructed
    u_self = DeformationField(*(0.3 * np.random.default_rng(5).standard_normal((2,) + ref.shape)))
    linear = all(
        interpolate_field(u_self, res.field, ispec, f) == field_lincomb(1 - lam, u_self, lam, res.field)
        for f, lam in ((4.0, 0.25), (6.0, 0.5), (8.0, 0.75))
    )
    mid = ssim(frames[2].image, render(spec, 6.0)[0])
    ok = ref_exact and def_exact and linear and mid >= 0.90
    return ok, (f"f_ref->reference exact={ref_exact}, f_def->reconstruction exact={def_exact}, "
                f"lincomb bitwise={linear}, SSIM(synthetic 6 N, render 6 N)={mid:.4f} (>=0.90)")


# --- 6 ----------------------------------------------------------------------------


def check_psnr():
    rng = np.random.default_rng(6)
    u8 = rng.integers(0, 255, (64, 64))
    value = psnr(u8 / 255.0, (u8 + 1) / 255.0)
    return abs(value - 48.13) <= 0.01, f"one 8-bit step everywhere: {value:.4f} dB (48.13 +- 0.01)"


# --- 7 ----------------------------------------------------------------------------


def check_augmentation(tmp: Path):
    t0 = time.perf_counter()
    records = []
    for seed in range(3):
        records += render_sweep(default_spec(seed), [F_REF, F_DEF], tmp / "sweep", f"subj{seed}").records
    from sonoreg.imagecore import write_manifest

    write_manifest(records, tmp / "sweep" / "all.jsonl")
    res = augment_dataset(tmp / "sweep" / "all.jsonl", InterpolationSpec(F_REF, F_DEF, (4.0, 6.0, 8.0)),
                          SolverConfig(), tmp / "aug")
    out = load_manifest(res.manifest)
    per_subject = {}
    for r in out:
        per_subject.setdefault(r.subject, []).append(r)
    counts_ok = res.pairs == 3 and all(len(v) == 3 for v in per_subject.values()) and len(per_subject) == 3
    binary = nonempty = monotone = True
    areas_txt = []
    for subject, recs in sorted(per_subject.items()):
        recs.sort(key=lambda r: r.force_n)
        areas = []
        for r in recs:
            raw = read_raster_u8(r.mask)
            binary &= set(np.unique(raw)) <= {0, 255}
            areas.append(int(np.count_nonzero(raw)))
        nonempty &= min(areas) > 0
        monotone &= all(a >= b for a, b in zip(areas, areas[1:]))
        areas_txt.append(f"{subject} {areas}")
    dt = time.perf_counter() - t0
    ok = counts_ok and binary and nonempty and monotone and not res.failures and dt < 300
    return ok, (f"{len(out)} synthetic frames from {res.pairs} pairs (3 per pair={counts_ok}), binary={binary}, "
                f"nonempty={nonempty}, mask area non-increasing in force={monotone} [{'; '.join(areas_txt)}], "
                f"{dt:.0f}s (<300s)")


# --- 8 ----------------------------------------------------------------------------


def check_determinism(tmp: Path):
    spec = default_spec(11, 64)
    a, b = render(spec, 7.0), render(spec, 7.0)
    renders_equal = a[0] == b[0] and a[1] == b[1] and a[2] == b[2]
    cfg = SolverConfig(loss=LossConfig(variant="fa_cyclic"), iters_per_level=60)
    r1, r2 = register(b[0], a[0], cfg), register(b[0], a[0], cfg)
    fields_equal = r1.field == r2.field and r1.aux_field == r2.aux_field and r1.reconstructed == r2.reconstructed
    sweep = render_sweep(spec, [F_REF, F_DEF], tmp / "in", "det")
    ispec = InterpolationSpec(F_REF, F_DEF, (4.0, 6.0, 8.0))
    runs = [augment_dataset(sweep.manifest, ispec, SolverConfig(iters_per_level=60), tmp / f"run{i}") for i in (1, 2)]
    files_equal = runs[0].manifest.read_bytes() == runs[1].manifest.read_bytes()
    for p in sorted((tmp / "run1").iterdir()):
        files_equal &= p.read_bytes() == (tmp / "run2" / p.name).read_bytes()
    udf_equal = all(
        read_field(p) == read_field(tmp / "run2" / p.name) for p in (tmp / "run1").glob("*.udf")
    )
    ok = renders_equal and fields_equal and files_equal and udf_equal
    return ok, (f"renders equal={renders_equal}, fa-cyclic fields/reconstruction equal={fields_equal}, "
                f"augmentation outputs byte-identical={files_equal and udf_equal}")


# --- 9 ----------------------------------------------------------------------------


def check_bench():
    rep = bench_register(256, SolverConfig(), repetitions=1)
    hz = rep["hz"]
    ok = hz is not None and np.isfinite(hz) and hz > 0
    return ok, (f"256x256 loss={rep['loss']}: {hz:.3f} registrations/s ({rep['mean_s']:.1f}s each); "
                f"reference {REFERENCE_HZ:g} Hz is GPU network inference, reported for comparison only")


# --- pytest wrappers --------------------------------------------------------------------


def _run(n, fn, *args):
    ok, detail = fn(*args)
    record(n, ok, detail)
    assert ok, summary_line(n)


def test_1_warp_identities():
    _run(1, check_warp)


def test_2_gradient_correctness():
    _run(2, check_gradients)


def test_3_loss_algebra():
    _run(3, check_loss_algebra)


@pytest.mark.slow
def test_4_phantom_registration_accuracy():
    _run(4, check_phantom_accuracy)


@pytest.mark.slow
def test_5_synthesis_endpoints_and_linearity():
    _run(5, check_synthesis)


def test_6_psnr_ceiling():
    _run(6, check_psnr)


@pytest.mark.slow
def test_7_augmentation_pipeline(tmp_path):
    _run(7, check_augmentation, tmp_path)


def test_8_determinism(tmp_path):
    _run(8, check_determinism, tmp_path)


@pytest.mark.slow
def test_9_throughput_report():
    _run(9, check_bench)


if __name__ == "__main__":
    import tempfile

    checks = [check_warp, check_gradients, check_loss_algebra, check_phantom_accuracy, check_synthesis,
              check_psnr, check_augmentation, check_determinism, check_bench]
    with tempfile.TemporaryDirectory() as d:
        for n, fn in enumerate(checks, start=1):
            args = (Path(d) / f"c{n}",) if fn in (check_augmentation, check_determinism) else ()
            for a in args:
                a.mkdir()
            try:
                ok, detail = fn(*args)
            except Exception as exc:  # report and continue with the remaining criteria
                ok, detail = False, f"error: {exc!r}"
            record(n, ok, detail)
    sys.exit(0 if all(ok for ok, _ in RESULTS.values()) else 1)
