"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or usage, 2 I/O failure, 3 numerical
failure. Machine-readable output (JSON) goes to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from . import __version__
from .errors import NumericalError, ValidationError
from .features import DEFAULT_RADIUS, DetectorSettings
from .imagecore import load_image, load_mask, save_image, save_mask
from .losses import LossConfig
from .metrics import MAX_SCALES, MetricReport, endpoint_error, f_ssim, iou, ms_ssim, ms_ssim_per_scale, psnr, ssim
from .solver import SolverConfig, bench_register, register

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
REFERENCE_HZ = 33.0  # GPU network inference rate quoted for comparison only

METRICS = ("ssim", "ms-ssim", "psnr", "f-ssim", "iou", "epe")

log = logging.getLogger("sonoreg")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one number")
    return vals


def _add_solver_flags(p):
    g = p.add_argument_group("solver")
    g.add_argument("--loss", default="us", help="us, cyclic or fa-cyclic (default us)")
    g.add_argument("--beta", type=float, default=0.85, help="SSIM weight in [0, 1] (default 0.85)")
    g.add_argument("--levels", type=int, default=4, help="pyramid levels (default 4)")
    g.add_argument("--iters", type=int, default=150, help="iterations per level (default 150)")
    g.add_argument("--scales", type=int, default=MAX_SCALES, help=f"MS-SSIM scales (default {MAX_SCALES})")
    g = p.add_argument_group("keypoint detector (fa-cyclic)")
    g.add_argument("--octaves", type=int, default=3)
    g.add_argument("--contrast-thresh", type=float, default=0.03)
    g.add_argument("--feature-radius", type=float, default=DEFAULT_RADIUS)


def _solver_config(a) -> SolverConfig:
    detector = DetectorSettings(octaves=a.octaves, contrast_threshold=a.contrast_thresh)
    loss = LossConfig(beta=a.beta, ms_scales=a.scales, feature_radius=a.feature_radius, variant=a.loss,
                      detector=detector)
    return SolverConfig(loss=loss, pyramid_levels=a.levels, iters_per_level=a.iters)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, allow_nan=False) + "\n")


# --- subcommands -------------------------------------------------------------


def cmd_register(a) -> int:
    ref, dfm = load_image(a.ref), load_image(getattr(a, "def"))
    res = register(dfm, ref, _solver_config(a))
    from .warp import write_field

    if a.out:
        write_field(res.field, a.out)
    if a.out_recon:
        save_image(res.reconstructed, a.out_recon)
    _emit({
        "loss": res.final_loss.total,
        "ssim_term": res.final_loss.ssim_term,
        "smooth_term": res.final_loss.smooth_term,
        "iterations": res.iterations_used,
        "max_displacement": float(res.field.magnitude().max()),
    })
    return EXIT_OK


def cmd_warp(a) -> int:
    from .warp import read_field, warp_image, warp_mask

    u = read_field(a.field)
    if a.mask:
        save_mask(warp_mask(u, load_mask(a.src)), a.out)
    else:
        save_image(warp_image(u, load_image(a.src)), a.out)
    return EXIT_OK


def cmd_synth(a) -> int:
    from .synth import InterpolationSpec, augment_dataset

    spec = InterpolationSpec(a.f_ref, a.f_def, tuple(a.f_new))
    res = augment_dataset(a.manifest, spec, _solver_config(a), a.out, zero_self=a.zero_self, jobs=a.jobs)
    for subject in res.skipped:
        print(f"warning: subject {subject!r} has no {a.f_ref:g} N / {a.f_def:g} N pair, skipped", file=sys.stderr)
    for subject, msg in res.failures.items():
        print(f"warning: pair {subject!r} failed: {msg}", file=sys.stderr)
    _emit({
        "manifest": str(res.manifest),
        "pairs": res.pairs,
        "frames": len(res.records),
        "skipped": len(res.skipped),
        "failed": len(res.failures),
    })
    return EXIT_OK


def cmd_eval(a) -> int:
    name = a.metric
    per_scale = None
    if name == "epe":
        from .warp import read_field

        value = endpoint_error(read_field(a.a), read_field(a.b))
    elif name == "iou":
        value = iou(load_mask(a.a), load_mask(a.b))
    else:
        x, y = load_image(a.a), load_image(a.b)
        if name == "ssim":
            value = ssim(x, y)
        elif name == "ms-ssim":
            value = ms_ssim(x, y, a.scales)
            per_scale = ms_ssim_per_scale(x, y, a.scales)
        elif name == "psnr":
            value = psnr(x, y)
        else:
            if not a.mask:
                raise ValidationError("f-ssim needs --mask")
            value = f_ssim(x, y, load_mask(a.mask))
    _emit(MetricReport(name, value, per_scale).to_json())
    return EXIT_OK


def cmd_phantom(a) -> int:
    from .phantom import default_spec, load_spec, render_sweep

    spec = load_spec(a.spec) if a.spec else default_spec(a.seed, a.size)
    sweep = render_sweep(spec, a.forces, a.out, a.subject)
    _emit({
        "manifest": str(sweep.manifest),
        "frames": len(sweep.records),
        "mask_areas": [m.area() for m in sweep.masks],
    })
    return EXIT_OK


def cmd_bench(a) -> int:
    report = bench_register(a.size, _solver_config(a), a.reps, a.seed)
    report["reference_hz"] = REFERENCE_HZ
    report["reference_note"] = "GPU network inference; not a target for this CPU solver"
    print(f"{a.size}x{a.size}: {report['hz'] or 0.0:.3f} registrations/s "
          f"(reference point {REFERENCE_HZ:g} Hz)", file=sys.stderr)
    _emit(report)
    return EXIT_OK


def cmd_overlay(a) -> int:
    from .overlay import overlay
    from .warp import read_field

    if (a.field is None) == (a.mask is None):
        raise ValidationError("give exactly one of --field or --mask")
    what = read_field(a.field) if a.field else load_mask(a.mask)
    overlay(load_image(a.image), what, a.out, a.step)
    return EXIT_OK


def build_parser() -> Parser:
    p = Parser(prog="sonoreg", description="Deformable registration and force-interpolated synthesis "
                                           "for 2D ultrasound-like images.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    s = sub.add_parser("register", help="estimate the field mapping --ref onto --def")
    s.add_argument("--ref", required=True, help="reference (low force) image")
    s.add_argument("--def", required=True, help="deformed (high force) image")
    s.add_argument("--out", help="field output (.udf)")
    s.add_argument("--out-recon", help="reconstructed deformed image (PNG/PGM)")
    _add_solver_flags(s)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("warp", help="apply a .udf field to an image or mask")
    s.add_argument("--field", required=True)
    s.add_argument("--src", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mask", action="store_true", help="treat --src as a binary mask (nearest neighbour)")
    s.set_defaults(func=cmd_warp)

    s = sub.add_parser("synth", help="synthesize frames at intermediate forces from a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--f-ref", type=float, required=True)
    s.add_argument("--f-def", type=float, required=True)
    s.add_argument("--f-new", type=_floats, default=[4.0, 6.0, 8.0], help="comma-separated forces (default 4,6,8)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--zero-self", action="store_true", help="use a zero self-registration field")
    s.add_argument("--jobs", type=int, default=1, help="pairs processed in parallel")
    _add_solver_flags(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval", help="print a metric as one line of JSON")
    s.add_argument("metric", choices=METRICS)
    s.add_argument("--a", required=True, help="first image, mask or field")
    s.add_argument("--b", required=True, help="second image, mask or field")
    s.add_argument("--mask", help="feature map for f-ssim")
    s.add_argument("--scales", type=int, default=MAX_SCALES)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("phantom", help="render a phantom force sweep")
    s.add_argument("--spec", help="phantom spec JSON (default: built-in two-vessel phantom)")
    s.add_argument("--seed", type=int, default=0, help="seed for the built-in phantom")
    s.add_argument("--size", type=int, default=128, help="side of the built-in phantom")
    s.add_argument("--forces", type=_floats, default=[2.0, 10.0], help="comma-separated forces (default 2,10)")
    s.add_argument("--out", required=True)
    s.add_argument("--subject", help="subject id in the manifest")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("bench", help="time registrations of a phantom pair")
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--reps", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    _add_solver_flags(s)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("overlay", help="draw field vectors (4x4 grid) or a mask contour over an image")
    s.add_argument("--image", required=True)
    s.add_argument("--field")
    s.add_argument("--mask")
    s.add_argument("--out", required=True)
    s.add_argument("--step", type=int, default=4)
    s.set_defaults(func=cmd_overlay)
    return p


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
