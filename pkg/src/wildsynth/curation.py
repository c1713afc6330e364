"""Balanced base-set construction and stratified subsampling.

Sampling is reproducible: every draw comes from a seeded PCG64
generator, and output files record the generator name and seed so a
run can be audited.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InsufficientPoolError
from .ingest import BBox, CaptureContext, Category, DayNight, DetectionRecord
from .taxonomy import TARGET_SPECIES

GENERATOR_NAME = "pcg64"

PLACEMENT_WEIGHTS = (0.6, 0.3, 0.1)

# Chebyshev annuli of equal width: center third, mid third, edge third.
CENTER_BOUND = 1.0 / 3.0
MID_BOUND = 2.0 / 3.0


@dataclass(frozen=True)
class StratumKey:
    """Grouping key for species x day/night x season; missing parts are 'unknown'."""

    species: str
    day_night: str
    season: str


@dataclass(frozen=True)
class BaseImageRecord:
    image_id: str
    species: str
    detection: DetectionRecord
    context: CaptureContext
    placement_weight: float

    def __post_init__(self):
        if self.placement_weight not in PLACEMENT_WEIGHTS:
            raise ValueError(f"placement_weight must be one of {PLACEMENT_WEIGHTS}")

    @property
    def stratum(self) -> StratumKey:
        dn = self.context.day_night.value if self.context.day_night else "unknown"
        season = self.context.season.value if self.context.season else "unknown"
        return StratumKey(self.species, dn, season)


def placement_weight(bbox: BBox) -> float:
    """Weight by where the box centroid sits: 0.6 center, 0.3 mid, 0.1 edge.

    Uses the normalized Chebyshev distance of the centroid from frame
    center, d = 2 * max(|cx - 0.5|, |cy - 0.5|), split into thirds.
    """
    cx, cy = bbox.centroid
    d = 2.0 * max(abs(cx - 0.5), abs(cy - 0.5))
    if d <= CENTER_BOUND:
        return 0.6
    if d <= MID_BOUND:
        return 0.3
    return 0.1


def make_candidate(
    image_id: str,
    species: str,
    detection: DetectionRecord,
    context: CaptureContext,
    species_list: Sequence[str] = TARGET_SPECIES,
) -> BaseImageRecord:
    """Assemble a curation candidate, deriving its placement weight."""
    if species not in species_list:
        raise ValueError(f"species {species!r} not in configured list")
    return BaseImageRecord(
        image_id=image_id,
        species=species,
        detection=detection,
        context=context,
        placement_weight=placement_weight(detection.bbox),
    )


def largest_remainder(counts: dict, total: int) -> dict:
    """Hamilton apportionment of `total` proportional to integer `counts`.

    Exact integer arithmetic; ties in remainders break by key order.
    """
    pool = sum(counts.values())
    if total < 0:
        raise ValueError("total must be non-negative")
    if pool == 0:
        return {k: 0 for k in counts}
    base = {k: total * c // pool for k, c in counts.items()}
    leftover = total - sum(base.values())
    by_remainder = sorted(counts, key=lambda k: (-(total * counts[k] % pool), str(k)))
    for k in by_remainder[:leftover]:
        base[k] += 1
    return base


def build_base_set(
    candidates: Sequence[BaseImageRecord],
    target_size: int,
    seed: int,
    balance_species: bool = False,
) -> list[BaseImageRecord]:
    """Placement-weighted sampling without replacement into a balanced set.

    Species quotas are proportional to species frequency among the
    candidates (set balance_species for equal shares instead). Within a
    species, draws round-robin over (day_night, season) cells for
    temporal diversity; within a cell each draw picks proportionally to
    placement weight, renormalized as the pool shrinks. Bit-reproducible
    for a fixed input and seed.
    """
    if target_size > len(candidates):
        raise InsufficientPoolError(
            f"target_size {target_size} exceeds pool of {len(candidates)}"
        )
    rng = np.random.Generator(np.random.PCG64(seed))
    by_species: dict[str, list[BaseImageRecord]] = {}
    for rec in candidates:
        by_species.setdefault(rec.species, []).append(rec)

    pool_sizes = {sp: len(pool) for sp, pool in by_species.items()}
    if balance_species:
        quotas = _capped_equal_shares(pool_sizes, target_size)
    else:
        quotas = largest_remainder(pool_sizes, target_size)

    selected: list[BaseImageRecord] = []
    for sp in sorted(by_species):
        selected.extend(_draw_species(by_species[sp], quotas[sp], rng))
    return selected


def _draw_species(
    pool: list[BaseImageRecord], quota: int, rng: np.random.Generator
) -> list[BaseImageRecord]:
    cells: dict[tuple[str, str], list[BaseImageRecord]] = {}
    for rec in pool:
        key = (rec.stratum.day_night, rec.stratum.season)
        cells.setdefault(key, []).append(rec)
    cell_order = sorted(cells)
    out: list[BaseImageRecord] = []
    while len(out) < quota:
        progressed = False
        for key in cell_order:
            if len(out) >= quota:
                break
            cell = cells[key]
            if not cell:
                continue
            out.append(_weighted_draw(cell, rng))
            progressed = True
        if not progressed:
            raise InsufficientPoolError("species pool exhausted before quota")
    return out


def _weighted_draw(cell: list[BaseImageRecord], rng: np.random.Generator) -> BaseImageRecord:
    weights = np.array([rec.placement_weight for rec in cell], dtype=np.float64)
    idx = int(rng.choice(len(cell), p=weights / weights.sum()))
    return cell.pop(idx)


def _capped_equal_shares(pool_sizes: dict[str, int], total: int) -> dict[str, int]:
    """Equal species shares, with overflow past a pool's size redistributed."""
    quotas = {sp: 0 for sp in pool_sizes}
    remaining = total
    open_species = {sp for sp, n in pool_sizes.items() if n > 0}
    while remaining > 0 and open_species:
        shares = largest_remainder({sp: 1 for sp in sorted(open_species)}, remaining)
        remaining = 0
        for sp, share in shares.items():
            take = min(share, pool_sizes[sp] - quotas[sp])
            quotas[sp] += take
            remaining += share - take
        open_species = {sp for sp in open_species if quotas[sp] < pool_sizes[sp]}
    return quotas


def stratified_subsample(
    base_set: Sequence[BaseImageRecord], n: int, seed: int
) -> list[BaseImageRecord]:
    """Draw n records preserving species x day/night x season proportions.

    Per-stratum quotas come from largest-remainder apportionment of the
    stratum sizes, then each stratum is sampled uniformly without
    replacement. Deterministic given the seed.
    """
    if n > len(base_set):
        raise InsufficientPoolError(f"n {n} exceeds base set of {len(base_set)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    strata: dict[StratumKey, list[BaseImageRecord]] = {}
    for rec in base_set:
        strata.setdefault(rec.stratum, []).append(rec)
    sizes = {key: len(group) for key, group in strata.items()}
    quotas = largest_remainder(sizes, n)
    out: list[BaseImageRecord] = []
    for key in sorted(strata, key=lambda k: (k.species, k.day_night, k.season)):
        group = strata[key]
        take = quotas[key]
        idx = sorted(rng.choice(len(group), size=take, replace=False).tolist())
        out.extend(group[i] for i in idx)
    return out


def write_base_set(
    records: Iterable[BaseImageRecord], path: str | Path, seed: int
) -> None:
    """One structured record per line, with sampling provenance on each."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            bbox = rec.detection.bbox
            line = {
                "image_id": rec.image_id,
                "species": rec.species,
                "bbox": [bbox.x, bbox.y, bbox.w, bbox.h],
                "weight": rec.placement_weight,
                "confidence": rec.detection.confidence,
                "day_night": rec.stratum.day_night,
                "day_night_source": rec.context.day_night_source,
                "season": rec.stratum.season,
                "timestamp": rec.context.timestamp.isoformat() if rec.context.timestamp else None,
                "location_id": rec.context.location_id,
                "seed": seed,
                "generator": GENERATOR_NAME,
            }
            fh.write(json.dumps(line) + "\n")


def read_base_set(path: str | Path) -> list[BaseImageRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            ts = datetime.fromisoformat(obj["timestamp"]) if obj.get("timestamp") else None
            dn = obj.get("day_night")
            context = CaptureContext(
                species=obj["species"],
                timestamp=ts,
                day_night=DayNight(dn) if dn in ("day", "night") else None,
                day_night_source=obj.get("day_night_source"),
                location_id=obj.get("location_id"),
            )
            detection = DetectionRecord(
                image_id=obj["image_id"],
                bbox=BBox(*obj["bbox"]),
                confidence=float(obj.get("confidence", 1.0)),
                category=Category.ANIMAL,
            )
            records.append(
                BaseImageRecord(
                    image_id=obj["image_id"],
                    species=obj["species"],
                    detection=detection,
                    context=context,
                    placement_weight=float(obj["weight"]),
                )
            )
    return records
