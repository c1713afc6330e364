from __future__ import annotations

from datetime import datetime

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from wildsynth.curation import (
    build_base_set,
    largest_remainder,
    make_candidate,
    placement_weight,
    read_base_set,
    stratified_subsample,
    write_base_set,
)
from wildsynth.errors import InsufficientPoolError
from wildsynth.ingest import BBox, DayNight

from conftest import make_base


class TestPlacementWeight:
    def test_center_box(self):
        assert placement_weight(BBox(0.4, 0.4, 0.2, 0.2)) == 0.6

    def test_corner_box(self):
        # centroid (0.05, 0.05) -> d = 0.9
        assert placement_weight(BBox(0.0, 0.0, 0.1, 0.1)) == 0.1

    def test_mid_frame_box(self):
        # centroid (0.75, 0.5) -> d = 0.5, inside the middle annulus
        assert placement_weight(BBox(0.7, 0.4, 0.1, 0.2)) == 0.3

    def test_band_boundaries(self):
        # centroid exactly at d = 1/3 stays center; just outside drops to mid
        assert placement_weight(BBox(0.5 + 1 / 6 - 0.05, 0.45, 0.1, 0.1)) == 0.6
        assert placement_weight(BBox(0.5 + 1 / 6 - 0.05 + 0.01, 0.45, 0.1, 0.1)) == 0.3

    @given(
        st.floats(0.1, 0.9),
        st.floats(0.1, 0.9),
        st.floats(0.01, 0.09),
        st.floats(0.01, 0.09),
    )
    def test_invariant_under_centroid_preserving_changes(self, cx, cy, hw1, hh1):
        hw1 = min(hw1, cx - 1e-3, 1.0 - cx - 1e-3)
        hh1 = min(hh1, cy - 1e-3, 1.0 - cy - 1e-3)
        hw2, hh2 = hw1 / 2, hh1 / 2
        box1 = BBox(cx - hw1, cy - hh1, 2 * hw1, 2 * hh1)
        box2 = BBox(cx - hw2, cy - hh2, 2 * hw2, 2 * hh2)
        # rounding can nudge the two computed centroids apart by an ulp,
        # which is a different centroid, not a counterexample
        assume(box1.centroid == box2.centroid)
        assert placement_weight(box1) == placement_weight(box2)


class TestLargestRemainder:
    def test_eighty_twenty(self):
        assert largest_remainder({"a": 80, "b": 20}, 10) == {"a": 8, "b": 2}

    def test_sixty_thirty_ten(self):
        assert largest_remainder({"a": 60, "b": 30, "c": 10}, 10) == {"a": 6, "b": 3, "c": 1}

    def test_remainder_distribution(self):
        # 7 * (1/3) each = 2.33.. -> floors 2,2,2 with one leftover
        quotas = largest_remainder({"a": 1, "b": 1, "c": 1}, 7)
        assert sum(quotas.values()) == 7
        assert sorted(quotas.values()) == [2, 2, 3]

    @given(
        st.dictionaries(st.text(min_size=1, max_size=3), st.integers(0, 50), min_size=1, max_size=6),
        st.integers(0, 40),
    )
    def test_sums_and_bounds(self, counts, total):
        pool = sum(counts.values())
        total = min(total, pool)
        quotas = largest_remainder(counts, total)
        assert sum(quotas.values()) == (total if pool else 0)
        for key, q in quotas.items():
            assert q <= counts[key]
            # Hamilton never strays more than 1 from the exact share.
            if pool:
                assert abs(q - total * counts[key] / pool) < 1.0 + 1e-9


def candidates_one_species(n, weight_bbox=BBox(0.4, 0.4, 0.2, 0.2)):
    return [
        make_base(image_id=f"img_{i:03d}.jpg", bbox=weight_bbox) for i in range(n)
    ]


class TestBuildBaseSet:
    def test_quota_equals_pool_selects_all(self):
        pool = candidates_one_species(10)
        out = build_base_set(pool, 10, seed=7)
        assert sorted(r.image_id for r in out) == sorted(r.image_id for r in pool)

    def test_species_quotas_follow_frequency(self):
        pool = [
            make_base(image_id=f"fox_{i}.jpg", species="gray fox") for i in range(80)
        ] + [
            make_base(image_id=f"wolf_{i}.jpg", species="gray wolf") for i in range(20)
        ]
        out = build_base_set(pool, 10, seed=3)
        counts = {"gray fox": 0, "gray wolf": 0}
        for rec in out:
            counts[rec.species] += 1
        assert counts == {"gray fox": 8, "gray wolf": 2}

    def test_insufficient_pool(self):
        with pytest.raises(InsufficientPoolError):
            build_base_set(candidates_one_species(3), 4, seed=0)

    def test_deterministic_per_seed(self):
        pool = [
            make_base(
                image_id=f"img_{i}.jpg",
                bbox=BBox(0.05 * (i % 10), 0.05 * (i % 10), 0.1, 0.1),
            )
            for i in range(40)
        ]
        first = [r.image_id for r in build_base_set(pool, 15, seed=42)]
        second = [r.image_id for r in build_base_set(pool, 15, seed=42)]
        third = [r.image_id for r in build_base_set(pool, 15, seed=43)]
        assert first == second
        assert first != third

    def test_no_duplicates(self):
        pool = candidates_one_species(30)
        out = build_base_set(pool, 20, seed=5)
        ids = [r.image_id for r in out]
        assert len(ids) == len(set(ids))

    def test_weighted_draw_ratio_over_seeds(self):
        # One draw from {weight 0.6, weight 0.1} should pick the 0.6
        # candidate with probability 6/7; checked empirically.
        center = make_base(image_id="center.jpg", bbox=BBox(0.4, 0.4, 0.2, 0.2))
        corner = make_base(image_id="corner.jpg", bbox=BBox(0.0, 0.0, 0.1, 0.1))
        assert center.placement_weight == 0.6
        assert corner.placement_weight == 0.1
        hits = sum(
            build_base_set([center, corner], 1, seed=s)[0].image_id == "center.jpg"
            for s in range(10_000)
        )
        assert abs(hits / 10_000 - 6 / 7) <= 0.02

    def test_round_robin_spreads_over_cells(self):
        # 3 night + 3 day candidates, quota 4: round-robin must take 2 + 2.
        pool = [
            make_base(image_id=f"day_{i}.jpg", day_night=DayNight.DAY) for i in range(3)
        ] + [
            make_base(image_id=f"night_{i}.jpg", day_night=DayNight.NIGHT)
            for i in range(3)
        ]
        out = build_base_set(pool, 4, seed=11)
        day_count = sum(1 for r in out if r.context.day_night is DayNight.DAY)
        assert day_count == 2

    def test_balance_species_option(self):
        pool = [
            make_base(image_id=f"fox_{i}.jpg", species="gray fox") for i in range(90)
        ] + [
            make_base(image_id=f"wolf_{i}.jpg", species="gray wolf") for i in range(10)
        ]
        out = build_base_set(pool, 16, seed=1, balance_species=True)
        counts = {"gray fox": 0, "gray wolf": 0}
        for rec in out:
            counts[rec.species] += 1
        assert counts == {"gray fox": 8, "gray wolf": 8}


class TestStratifiedSubsample:
    def test_single_stratum(self):
        base = candidates_one_species(8)
        out = stratified_subsample(base, 5, seed=2)
        assert len(out) == 5
        assert len({r.image_id for r in out}) == 5

    def test_exact_quotas_60_30_10(self):
        base = (
            [make_base(image_id=f"a{i}", species="gray fox") for i in range(60)]
            + [make_base(image_id=f"b{i}", species="gray wolf") for i in range(30)]
            + [make_base(image_id=f"c{i}", species="raccoon") for i in range(10)]
        )
        out = stratified_subsample(base, 10, seed=0)
        counts = {}
        for rec in out:
            counts[rec.species] = counts.get(rec.species, 0) + 1
        assert counts == {"gray fox": 6, "gray wolf": 3, "raccoon": 1}

    def test_full_draw_is_permutation(self):
        base = candidates_one_species(12)
        out = stratified_subsample(base, 12, seed=9)
        assert sorted(r.image_id for r in out) == sorted(r.image_id for r in base)

    def test_insufficient(self):
        with pytest.raises(InsufficientPoolError):
            stratified_subsample(candidates_one_species(3), 5, seed=0)

    def test_deterministic(self):
        base = candidates_one_species(20)
        a = [r.image_id for r in stratified_subsample(base, 7, seed=12)]
        b = [r.image_id for r in stratified_subsample(base, 7, seed=12)]
        assert a == b

    @settings(max_examples=25)
    @given(st.integers(0, 2**32), st.integers(1, 40))
    def test_stratum_quota_bound(self, seed, n):
        rng = np.random.Generator(np.random.PCG64(seed))
        species = ["gray fox", "gray wolf", "raccoon"]
        base = [
            make_base(
                image_id=f"i{i}",
                species=species[int(rng.integers(0, 3))],
                day_night=DayNight.DAY if rng.integers(0, 2) else DayNight.NIGHT,
            )
            for i in range(60)
        ]
        n = min(n, len(base))
        out = stratified_subsample(base, n, seed=seed)
        assert len(out) == n
        sizes: dict = {}
        for rec in base:
            sizes[rec.stratum] = sizes.get(rec.stratum, 0) + 1
        got: dict = {}
        for rec in out:
            got[rec.stratum] = got.get(rec.stratum, 0) + 1
        for key, size in sizes.items():
            exact = n * size / len(base)
            assert abs(got.get(key, 0) - exact) < 1.0 + 1e-9


class TestBaseSetFile:
    def test_roundtrip(self, tmp_path):
        records = [
            make_base(
                image_id=f"img_{i}.jpg",
                species="elk",
                bbox=BBox(0.1 * i, 0.05, 0.2, 0.3),
                timestamp=datetime(2021, 3 + i, 2),
                day_night=DayNight.NIGHT if i % 2 else DayNight.DAY,
            )
            for i in range(4)
        ]
        path = tmp_path / "base_set.jsonl"
        write_base_set(records, path, seed=99)
        loaded = read_base_set(path)
        assert [r.image_id for r in loaded] == [r.image_id for r in records]
        assert [r.placement_weight for r in loaded] == [r.placement_weight for r in records]
        assert [r.stratum for r in loaded] == [r.stratum for r in records]
        first_line = path.read_text().splitlines()[0]
        assert '"seed": 99' in first_line
        assert '"generator": "pcg64"' in first_line

    def test_make_candidate_rejects_unknown_species(self):
        base = make_base()
        with pytest.raises(ValueError):
            make_candidate("x.jpg", "zebra", base.detection, base.context)


def test_base_set_records_day_night_source(tmp_path):
    from wildsynth.ingest import CaptureContext, DayNight
    from wildsynth.curation import BaseImageRecord

    base = make_base(image_id="s.jpg")
    tagged = BaseImageRecord(
        image_id=base.image_id,
        species=base.species,
        detection=base.detection,
        context=CaptureContext(
            species=base.species, day_night=DayNight.NIGHT, day_night_source="heuristic"
        ),
        placement_weight=base.placement_weight,
    )
    path = tmp_path / "b.jsonl"
    write_base_set([tagged], path, seed=1)
    loaded = read_base_set(path)
    assert loaded[0].context.day_night_source == "heuristic"
    assert loaded[0].context.day_night is DayNight.NIGHT
