"""Synthetic frames at intermediate probe forces.

Given a reference frame at ``f_ref`` and a deformed frame at ``f_def``, the
field for an intermediate force is the linear blend

    u(f) = (1 - lam) * u_self + lam * u_dr,   lam = (f - f_ref) / (f_def - f_ref)

where ``u_self`` registers the reference to itself and ``u_dr`` registers the
deformed frame to the reference. Warping the reference (and its label) by
``u(f)`` gives the synthetic frame. ``lam = 1`` reproduces the solver's
reconstruction of the deformed frame.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .errors import DomainError, SonoregError, ValidationError
from .imagecore import (
    BinaryMask,
    FrameRecord,
    Image,
    PathLike,
    load_image,
    load_manifest,
    load_mask,
    save_image,
    save_mask,
    write_manifest,
)
from .solver import SolverConfig, register, self_register
from .warp import DeformationField, field_lincomb, warp_image, warp_mask, write_field

log = logging.getLogger(__name__)

MANIFEST_NAME = "augmented.jsonl"


@dataclass(frozen=True)
class InterpolationSpec:
    f_ref: float
    f_def: float
    f_new: tuple = (4.0, 6.0, 8.0)

    def __post_init__(self):
        object.__setattr__(self, "f_new", tuple(float(f) for f in self.f_new))
        if not (math.isfinite(self.f_ref) and math.isfinite(self.f_def)) or not self.f_ref < self.f_def:
            raise ValidationError(f"need f_ref < f_def, got {self.f_ref} and {self.f_def}")
        for f in self.f_new:
            self._check(f)

    def _check(self, f: float) -> None:
        if not self.f_ref <= f <= self.f_def:
            raise DomainError(f"force {f} N lies outside [{self.f_ref}, {self.f_def}] N")

    def weight(self, f_new: float) -> float:
        """Blend weight of ``u_dr`` for ``f_new``."""
        self._check(f_new)
        return (f_new - self.f_ref) / (self.f_def - self.f_ref)


def interpolate_field(u_self: DeformationField, u_dr: DeformationField, spec: InterpolationSpec,
                      f_new: float) -> DeformationField:
    lam = spec.weight(f_new)
    return field_lincomb(1.0 - lam, u_self, lam, u_dr)


@dataclass
class SyntheticFrame:
    force: float
    image: Image
    mask: Optional[BinaryMask]
    field: DeformationField


def synthesize(reference: Image, ref_mask: Optional[BinaryMask], u_self: DeformationField,
               u_dr: DeformationField, spec: InterpolationSpec) -> list[SyntheticFrame]:
    out = []
    for f in spec.f_new:
        u = interpolate_field(u_self, u_dr, spec, f)
        img = warp_image(u, reference)
        mask = warp_mask(u, ref_mask) if ref_mask is not None else None
        out.append(SyntheticFrame(f, img, mask, u))
    return out


@dataclass
class AugmentResult:
    manifest: Path
    records: list = field(default_factory=list)
    pairs: int = 0
    skipped: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)


def _close(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-9)


def pair_frames(records: Sequence[FrameRecord], f_ref: float, f_def: float):
    """Group real frames by subject; returns ``(pairs, unpaired_subjects)``.

    The first frame at each force wins when a subject has several.
    """
    by_subject: dict[str, dict[str, FrameRecord]] = {}
    order = []
    for rec in records:
        if rec.synthetic:
            continue
        slot = by_subject.setdefault(rec.subject, {})
        if rec.subject not in order:
            order.append(rec.subject)
        if _close(rec.force_n, f_ref):
            slot.setdefault("ref", rec)
        elif _close(rec.force_n, f_def):
            slot.setdefault("def", rec)
    pairs, unpaired = [], []
    for subject in order:
        slot = by_subject[subject]
        if "ref" in slot and "def" in slot:
            pairs.append((subject, slot["ref"], slot["def"]))
        else:
            unpaired.append(subject)
    return pairs, unpaired


def _tag(force: float) -> str:
    return f"{force:g}".replace(".", "p")


def _process_pair(args):
    subject, ref_rec, def_rec, spec, cfg, out_dir, zero_self = args
    reference = load_image(ref_rec.path)
    deformed = load_image(def_rec.path)
    ref_mask = load_mask(ref_rec.mask) if ref_rec.mask is not None else None
    if zero_self:
        u_self = DeformationField.zeros(*reference.shape)
    else:
        u_self = self_register(reference, cfg).field
    u_dr = register(deformed, reference, cfg).field
    records = []
    for frame in synthesize(reference, ref_mask, u_self, u_dr, spec):
        stem = f"{subject}_syn_f{_tag(frame.force)}"
        img_path = out_dir / f"{stem}.png"
        save_image(frame.image, img_path)
        write_field(frame.field, out_dir / f"{stem}_field.udf")
        mask_path = None
        if frame.mask is not None:
            mask_path = out_dir / f"{stem}_mask.png"
            save_mask(frame.mask, mask_path)
        records.append(FrameRecord(img_path, frame.force, subject, ref_rec.mode, mask_path, synthetic=True))
    return records


def augment_dataset(manifest: PathLike, spec: InterpolationSpec, cfg: SolverConfig, out_dir: PathLike,
                    zero_self: bool = False, jobs: int = 1) -> AugmentResult:
    """Register every (f_ref, f_def) pair in ``manifest`` and emit synthetic frames.

    Subjects without both forces are skipped with a warning; a pair whose
    registration fails is recorded in ``failures`` and the run continues.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = load_manifest(manifest)
    pairs, unpaired = pair_frames(records, spec.f_ref, spec.f_def)
    for subject in unpaired:
        log.warning("subject %r has no %g N / %g N pair; skipped", subject, spec.f_ref, spec.f_def)
    result = AugmentResult(out / MANIFEST_NAME, pairs=len(pairs), skipped=unpaired)
    tasks = [(s, r, d, spec, cfg, out, zero_self) for s, r, d in pairs]

    def collect(subject, fn, *args):
        try:
            result.records.extend(fn(*args))
        except (SonoregError, ArithmeticError, OSError) as exc:
            log.warning("pair %r failed: %s", subject, exc)
            result.failures[subject] = str(exc)

    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [(t[0], pool.submit(_process_pair, t)) for t in tasks]
            for subject, fut in futures:
                collect(subject, fut.result)
    else:
        for t in tasks:
            collect(t[0], _process_pair, t)
    write_manifest(result.records, result.manifest)
    return result
