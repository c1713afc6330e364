"""Aggregate manifests into run, per-variant, and per-species tables.

Rates are reported as whole percents rounded half-up, with numerator
and denominator alongside so every figure can be recomputed from raw
manifest rows. Pass-rate denominators count generated variants only:
errored and interrupted steps are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Sequence, Union

from .manifest import STATUS_FAIL, STATUS_PASS, ManifestEntry, load_entries
from .qc import GatePath

VARIANT_LABELS = ("sham", "alopecia", "emaciated", "severe")

ManifestLike = Union[str, Path, Sequence[ManifestEntry]]


def pct_half_up(numerator: int, denominator: int) -> int:
    """Exact integer percent, half rounded up; 0 for an empty denominator."""
    if denominator == 0:
        return 0
    return (200 * numerator + denominator) // (2 * denominator)


def mean_3dp(values: Sequence[float]) -> str:
    """Mean formatted to 3 decimals, half-up; '-' when empty."""
    if not values:
        return "-"
    mean = sum(values) / len(values)
    return str(Decimal(repr(mean)).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


def _entries(manifest: ManifestLike) -> list[ManifestEntry]:
    if isinstance(manifest, (str, Path)):
        return load_entries(manifest)
    return list(manifest)


@dataclass(frozen=True)
class SummaryTable:
    species_count: int
    bases_processed: int
    variants_generated: int
    qc_passes: int
    sham_total: int
    sham_rejections: int
    variants_skipped: int
    day_generated: int
    day_passes: int
    night_generated: int
    night_passes: int
    errored_steps: int
    interrupted_steps: int

    @property
    def passes_str(self) -> str:
        return f"{self.qc_passes} ({pct_half_up(self.qc_passes, self.variants_generated)}%)"

    @property
    def sham_str(self) -> str:
        return (
            f"{self.sham_rejections}/{self.sham_total} "
            f"({pct_half_up(self.sham_rejections, self.sham_total)}%)"
        )

    @property
    def day_rate_str(self) -> str:
        return f"{pct_half_up(self.day_passes, self.day_generated)}%"

    @property
    def night_rate_str(self) -> str:
        return f"{pct_half_up(self.night_passes, self.night_generated)}%"

    def to_text(self) -> str:
        rows = [
            ("Species represented", str(self.species_count)),
            ("Base images processed", str(self.bases_processed)),
            ("Total variants generated", str(self.variants_generated)),
            ("QC-passing variants", self.passes_str),
            ("Sham pre-filter rejections", self.sham_str),
            ("Variants skipped via sham", str(self.variants_skipped)),
            ("Daytime pass rate", f"{self.day_rate_str} ({self.day_passes}/{self.day_generated})"),
            ("Nighttime pass rate", f"{self.night_rate_str} ({self.night_passes}/{self.night_generated})"),
            ("Errored steps (excluded)", str(self.errored_steps)),
            ("Interrupted steps (excluded)", str(self.interrupted_steps)),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)

    def to_dict(self) -> dict:
        return {
            "species_count": self.species_count,
            "bases_processed": self.bases_processed,
            "variants_generated": self.variants_generated,
            "qc_passes": self.qc_passes,
            "qc_pass_pct": pct_half_up(self.qc_passes, self.variants_generated),
            "sham_total": self.sham_total,
            "sham_rejections": self.sham_rejections,
            "sham_rejection_pct": pct_half_up(self.sham_rejections, self.sham_total),
            "variants_skipped": self.variants_skipped,
            "day_generated": self.day_generated,
            "day_passes": self.day_passes,
            "day_pass_pct": pct_half_up(self.day_passes, self.day_generated),
            "night_generated": self.night_generated,
            "night_passes": self.night_passes,
            "night_pass_pct": pct_half_up(self.night_passes, self.night_generated),
            "errored_steps": self.errored_steps,
            "interrupted_steps": self.interrupted_steps,
        }


def summarize(manifest: ManifestLike) -> SummaryTable:
    """Run totals; an empty manifest yields an all-zero table."""
    entries = _entries(manifest)
    verdicts = [e for e in entries if e.has_verdict]
    shams = [e for e in verdicts if e.order_index == 0]
    day = [e for e in verdicts if e.day_night == "day"]
    night = [e for e in verdicts if e.day_night == "night"]
    sham_rejections = sum(1 for e in shams if e.status == STATUS_FAIL)
    return SummaryTable(
        species_count=len({e.species for e in verdicts}),
        bases_processed=len({e.base_image_id for e in entries}),
        variants_generated=len(verdicts),
        qc_passes=sum(1 for e in verdicts if e.status == STATUS_PASS),
        sham_total=len(shams),
        sham_rejections=sham_rejections,
        variants_skipped=3 * sham_rejections,
        day_generated=len(day),
        day_passes=sum(1 for e in day if e.status == STATUS_PASS),
        night_generated=len(night),
        night_passes=sum(1 for e in night if e.status == STATUS_PASS),
        errored_steps=sum(1 for e in entries if e.status == "error"),
        interrupted_steps=sum(1 for e in entries if e.status == "interrupted"),
    )


@dataclass(frozen=True)
class VariantRow:
    label: str
    generated: int
    passes: int
    norm_mae_only: int
    ssim_only: int
    both: int
    mean_ssim: str  # 3 decimals, over passing entries

    @property
    def pass_pct(self) -> int:
        return pct_half_up(self.passes, self.generated)

    def to_dict(self) -> dict:
        return {
            "variant": self.label,
            "generated": self.generated,
            "passes": self.passes,
            "pass_pct": self.pass_pct,
            "norm_mae_only": self.norm_mae_only,
            "ssim_only": self.ssim_only,
            "both": self.both,
            "mean_ssim": self.mean_ssim,
        }


def variant_breakdown(manifest: ManifestLike, day_only: bool = False) -> list[VariantRow]:
    """Per-variant pass rates and OR-gate path counts.

    Path counts only apply to day entries (night passes take the raw-MAE
    gate); with day_only the whole row is restricted to day entries.
    """
    entries = [e for e in _entries(manifest) if e.has_verdict]
    if day_only:
        entries = [e for e in entries if e.day_night == "day"]
    rows = []
    for label in VARIANT_LABELS:
        group = [e for e in entries if e.severity == label]
        if not group:
            rows.append(VariantRow(label, 0, 0, 0, 0, 0, "-"))
            continue
        passes = [e for e in group if e.status == STATUS_PASS]
        paths = [e.gate_path for e in passes]
        rows.append(
            VariantRow(
                label=label,
                generated=len(group),
                passes=len(passes),
                norm_mae_only=paths.count(GatePath.NORM_MAE_ONLY.value),
                ssim_only=paths.count(GatePath.SSIM_ONLY.value),
                both=paths.count(GatePath.BOTH.value),
                mean_ssim=mean_3dp([e.ssim for e in passes if e.ssim is not None]),
            )
        )
    return rows


def variant_breakdown_text(rows: Sequence[VariantRow]) -> str:
    header = f"{'Variant':<10} {'Pass%':>5} {'Norm':>5} {'SSIM':>5} {'Both':>5} {'MeanSSIM':>9} {'(n)':>6}"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r.label:<10} {r.pass_pct:>4}% {r.norm_mae_only:>5} {r.ssim_only:>5} "
            f"{r.both:>5} {r.mean_ssim:>9} {r.generated:>6}"
        )
    return "\n".join(lines)


@dataclass(frozen=True)
class SpeciesRow:
    species: str
    variant: str
    generated: int
    passes: int

    @property
    def pass_pct(self) -> int:
        return pct_half_up(self.passes, self.generated)

    def to_dict(self) -> dict:
        return {
            "species": self.species,
            "variant": self.variant,
            "generated": self.generated,
            "passes": self.passes,
            "pass_pct": self.pass_pct,
        }


def species_breakdown(manifest: ManifestLike) -> list[SpeciesRow]:
    """Pass rates per species per variant; empty groups are omitted."""
    entries = [e for e in _entries(manifest) if e.has_verdict]
    rows = []
    for species in sorted({e.species for e in entries}):
        for label in VARIANT_LABELS:
            group = [e for e in entries if e.species == species and e.severity == label]
            if not group:
                continue
            rows.append(
                SpeciesRow(
                    species=species,
                    variant=label,
                    generated=len(group),
                    passes=sum(1 for e in group if e.status == STATUS_PASS),
                )
            )
    return rows


def species_breakdown_text(rows: Sequence[SpeciesRow]) -> str:
    header = f"{'Species':<20} {'Variant':<10} {'Pass%':>5} {'(k/n)':>9}"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r.species:<20} {r.variant:<10} {r.pass_pct:>4}% {r.passes:>4}/{r.generated}"
        )
    return "\n".join(lines)
