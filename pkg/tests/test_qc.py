from __future__ import annotations

import numpy as np
import pytest
from scipy import ndimage as sp_ndimage
from skimage.metrics import structural_similarity as sk_ssim

from wildsynth.editor import DcShift, GlobalRerender, InBoxEdit, LocalPatch, mock_perturb
from wildsynth.errors import NoScenePixelsError, QcGeometryError
from wildsynth.ingest import BBox, DayNight, ImageBuffer
from wildsynth.qc import (
    ChangeMask,
    GatePath,
    GateReason,
    MaskSummary,
    QcParams,
    SceneScore,
    blurred_luma,
    connected_components,
    diff_mask,
    evaluate_pair,
    gate,
    gaussian_blur,
    gaussian_taps,
    labels_from_blobs,
    scene_scores,
)

from conftest import flat_image, textured_image
from oracles import (
    disk_dilation,
    flood_fill_labels,
    partition_signature,
    uniform_window_ssim,
)

CENTER_BOX = BBox(0.35, 0.35, 0.3, 0.3)


def plain_params(**overrides) -> QcParams:
    """Params with no edge margins; geometry stays easy to reason about."""
    defaults = dict(edge_margin_fraction=0.0)
    defaults.update(overrides)
    return QcParams(**defaults)


class TestConnectedComponents:
    def test_all_zero_plane(self):
        assert connected_components(np.zeros((16, 16), bool)) == []

    def test_diagonal_pixels_one_blob_under_8(self):
        plane = np.zeros((8, 8), bool)
        plane[2, 2] = plane[3, 3] = True
        blobs8 = connected_components(plane, connectivity=8)
        blobs4 = connected_components(plane, connectivity=4)
        assert len(blobs8) == 1 and blobs8[0].area == 2
        assert len(blobs4) == 2

    def test_known_shapes(self):
        plane = np.zeros((10, 12), bool)
        plane[1:4, 1:5] = True          # 3x4 block
        plane[6:9, 6] = True            # vertical bar of 3
        plane[0, 10] = True             # lone pixel
        blobs = connected_components(plane)
        assert sorted(b.area for b in blobs) == [1, 3, 12]

    def test_u_shape_merges_into_one(self):
        plane = np.zeros((6, 6), bool)
        plane[1:5, 1] = True
        plane[1:5, 4] = True
        plane[4, 1:5] = True
        blobs = connected_components(plane)
        assert len(blobs) == 1
        assert blobs[0].area == 4 + 4 + 2

    def test_checkerboard_is_single_component_under_8(self):
        plane = np.indices((12, 12)).sum(axis=0) % 2 == 0
        assert len(connected_components(plane, connectivity=8)) == 1

    @pytest.mark.parametrize("connectivity", [4, 8])
    def test_matches_flood_fill_on_random_planes(self, connectivity):
        for seed in range(300):
            rng = np.random.Generator(np.random.PCG64(seed))
            shape = (int(rng.integers(1, 17)), int(rng.integers(1, 17)))
            plane = rng.random(shape) < rng.uniform(0.2, 0.8)
            mine = labels_from_blobs(shape, connected_components(plane, connectivity))
            oracle = flood_fill_labels(plane, connectivity)
            assert partition_signature(mine) == partition_signature(oracle), f"seed {seed}"

    def test_blob_areas_exact_against_oracle(self):
        rng = np.random.Generator(np.random.PCG64(77))
        plane = rng.random((40, 40)) < 0.5
        blobs = connected_components(plane)
        oracle = flood_fill_labels(plane, 8)
        oracle_areas = sorted(
            int(np.sum(oracle == lab)) for lab in range(1, oracle.max() + 1)
        )
        assert sorted(b.area for b in blobs) == oracle_areas


class TestDiffMask:
    def test_identity_pair_empty_mask(self):
        img = textured_image(0)
        mask = diff_mask(img, img, CENTER_BOX, plain_params())
        assert mask.blob_count == 0
        assert mask.area_fraction == 0.0
        assert not mask.anchored
        assert not mask.bits.any()

    def test_dimension_mismatch(self):
        a = flat_image(h=64, w=64)
        b = flat_image(h=64, w=80)
        with pytest.raises(QcGeometryError):
            diff_mask(a, b, CENTER_BOX, plain_params())

    def test_threshold_is_strict(self):
        base = flat_image(100, h=80, w=80)
        arr = base.data.copy()
        arr[40:60, 40:60] += 12  # exactly at threshold: not changed
        mask = diff_mask(base, ImageBuffer(arr), CENTER_BOX, plain_params())
        assert mask.blob_count == 0
        arr2 = base.data.copy()
        arr2[40:60, 40:60] += 13  # one over: changed
        mask2 = diff_mask(base, ImageBuffer(arr2), CENTER_BOX, plain_params())
        assert mask2.blob_count == 1

    def test_in_box_edit_blobs_anchor_and_area(self):
        base = textured_image(3, h=100, w=100)
        bbox = BBox(0.3, 0.3, 0.2, 0.2)
        edited = mock_perturb(base, InBoxEdit(bbox, texture_amp=40, seed=5))
        params = plain_params(dilation_radius=6.0)
        mask = diff_mask(base, edited, bbox, params)
        assert mask.anchored
        assert mask.blob_count >= 1
        # Every changed pixel sits inside the bbox rect, so the dilated
        # mask is exactly rect (+) disk(6); compare to the brute-force
        # dilation oracle.
        x0, y0, x1, y1 = bbox.to_pixel_rect(100, 100)
        rect = np.zeros((100, 100), bool)
        rect[y0 : y1 + 1, x0 : x1 + 1] = True
        assert np.array_equal(mask.bits, disk_dilation(rect, 6.0))
        assert mask.area_fraction == pytest.approx(mask.bits.mean())

    def test_outside_bbox_patch_discarded_by_anchor_rule(self):
        base = flat_image(200, h=100, w=100)
        bbox = BBox(0.05, 0.05, 0.2, 0.2)  # top-left
        edited = mock_perturb(base, LocalPatch(rect=(60, 60, 25, 25), noise_amp=100, seed=2))
        mask = diff_mask(base, edited, bbox, plain_params())
        assert mask.blob_count == 0
        assert not mask.anchored
        assert not mask.bits.any()

    def test_small_blob_dropped_large_kept(self):
        # 100x100 image: min blob area is 0.0005 * 10000 = 5 px.
        base = flat_image(100, h=100, w=100)
        arr = base.data.copy()
        arr[40:42, 40:42] = 180  # 4 px < 5: dropped
        mask = diff_mask(base, ImageBuffer(arr), CENTER_BOX, plain_params())
        assert mask.blob_count == 0

        arr2 = base.data.copy()
        arr2[40:41, 40:45] = 180  # 5 px >= 5: kept
        mask2 = diff_mask(base, ImageBuffer(arr2), CENTER_BOX, plain_params())
        assert mask2.blob_count == 1

    def test_dilation_matches_disk_oracle_default_radius(self):
        # 100x100 frame: default radius max(5, 0.02 * 141.4) = 5.
        base = flat_image(50, h=100, w=100)
        arr = base.data.copy()
        arr[47:50, 47:50] = 120  # 9 px blob inside center bbox
        mask = diff_mask(base, ImageBuffer(arr), CENTER_BOX, plain_params())
        blob = np.zeros((100, 100), bool)
        blob[47:50, 47:50] = True
        assert np.array_equal(mask.bits, disk_dilation(blob, 5.0))

    def test_edge_margin_excluded_from_area_accounting(self):
        params = QcParams(edge_margin_fraction=0.06, dilation_radius=0.1)
        # H = 100 -> margin 6 rows top and bottom, scored region 88 rows.
        base = flat_image(50, h=100, w=100)
        arr = base.data.copy()
        bbox = BBox(0.0, 0.0, 0.5, 0.2)
        arr[0:10, 0:50] = 150  # blob spanning the top margin
        mask = diff_mask(base, ImageBuffer(arr), bbox, params)
        # Dilation radius ~0: mask is the blob itself. Rows 0-5 fall in
        # the margin; only rows 6-9 count, over a denominator of 88*100.
        assert mask.area_fraction == pytest.approx((4 * 50) / (88 * 100))

    def test_whole_image_denominator_option(self):
        params = QcParams(edge_margin_fraction=0.06, dilation_radius=0.1,
                          mask_area_denominator="image")
        base = flat_image(50, h=100, w=100)
        arr = base.data.copy()
        bbox = BBox(0.0, 0.0, 0.5, 0.2)
        arr[0:10, 0:50] = 150
        mask = diff_mask(base, ImageBuffer(arr), bbox, params)
        assert mask.area_fraction == pytest.approx((10 * 50) / (100 * 100))


class TestBlur:
    def test_taps_sum_exactly_one(self):
        taps = gaussian_taps(2.0)
        assert len(taps) == 13
        assert float(np.sum(taps)) == 1.0
        assert np.array_equal(taps, taps[::-1])

    def test_matches_scipy_reference(self):
        rng = np.random.Generator(np.random.PCG64(0))
        plane = rng.integers(0, 256, (64, 80)).astype(np.float64)
        taps = gaussian_taps(2.0)
        ref = sp_ndimage.correlate1d(plane, taps, axis=0, mode="mirror")
        ref = sp_ndimage.correlate1d(ref, taps, axis=1, mode="mirror")
        mine = gaussian_blur(plane, 2.0)
        np.testing.assert_allclose(mine, ref, rtol=1e-12, atol=1e-9)

    def test_constant_offset_survives_bitwise(self):
        rng = np.random.Generator(np.random.PCG64(1))
        plane = rng.integers(0, 200, (64, 64)).astype(np.int16)
        d = gaussian_blur((plane - plane) + np.int16(7), 2.0)
        assert np.all(d == 7.0)


class TestSceneScores:
    def test_identity_scores(self):
        img = textured_image(4)
        mask = diff_mask(img, img, CENTER_BOX, plain_params())
        score = scene_scores(img, img, mask, plain_params())
        assert score.raw_mae == 0.0
        assert score.norm_mae == 0.0
        assert score.ssim == 1.0
        assert score.scored_pixel_count == 64 * 64

    @pytest.mark.parametrize("delta", [3, 7, 11])
    def test_dc_shift_identity(self, delta):
        base = textured_image(5, low=20, high=200)  # headroom: no clamping
        shifted = mock_perturb(base, DcShift(delta, delta, delta))
        params = plain_params()
        mask = diff_mask(base, shifted, CENTER_BOX, params)
        assert mask.blob_count == 0  # delta <= threshold: empty mask
        score = scene_scores(base, shifted, mask, params)
        assert score.raw_mae == float(delta)
        assert score.norm_mae == 0.0

    def test_asymmetric_dc_shift(self):
        base = textured_image(6, low=30, high=200)
        shifted = mock_perturb(base, DcShift(2, 5, 9))
        params = plain_params()
        mask = diff_mask(base, shifted, CENTER_BOX, params)
        score = scene_scores(base, shifted, mask, params)
        assert score.raw_mae == pytest.approx((2 + 5 + 9) / 3, abs=1e-12)
        assert score.norm_mae <= 1e-9

    def test_scene_excludes_mask_and_margins(self):
        params = QcParams(edge_margin_fraction=0.1, dilation_radius=3.0)
        base = textured_image(7, h=100, w=100)
        bbox = BBox(0.3, 0.3, 0.2, 0.2)
        edited = mock_perturb(base, InBoxEdit(bbox, texture_amp=40, seed=1))
        mask = diff_mask(base, edited, bbox, params)
        score = scene_scores(base, edited, mask, params)
        expected = (100 - 2 * 10) * 100 - int(mask.bits[10:90].sum())
        assert score.scored_pixel_count == expected

    def test_no_scene_pixels_raises(self):
        img = textured_image(8)
        full = ChangeMask(
            bits=np.ones((64, 64), bool), area_fraction=1.0, blob_count=1, anchored=True
        )
        with pytest.raises(NoScenePixelsError):
            scene_scores(img, img, full, plain_params())

    def test_ssim_matches_skimage_on_clean_frames(self):
        a = textured_image(9, h=72, w=96)
        b = textured_image(10, h=72, w=96)
        params = plain_params()
        empty = diff_mask(a, a, CENTER_BOX, params)
        score = scene_scores(a, b, empty, params)
        # Independent reference: skimage (double precision) over the same
        # blurred lumas; the production pipeline runs single precision.
        ya = blurred_luma(a, 2.0).astype(np.float64)
        yb = blurred_luma(b, 2.0).astype(np.float64)
        ref = sk_ssim(ya, yb, win_size=7, data_range=255.0, gaussian_weights=False)
        assert score.ssim == pytest.approx(ref, rel=1e-5)

    def test_ssim_matches_windowed_oracle_with_mask(self):
        a = textured_image(11, h=64, w=64)
        arr = a.data.copy()
        arr[28:36, 28:36] = 250
        b = ImageBuffer(arr)
        params = plain_params(dilation_radius=2.0)
        mask = diff_mask(a, b, CENTER_BOX, params)
        assert mask.bits.any()
        score = scene_scores(a, b, mask, params)

        ya = blurred_luma(a, 2.0).astype(np.float64)
        yb = blurred_luma(b, 2.0).astype(np.float64)
        hits = np.zeros((64, 64), bool)
        pad = 3
        for i in range(pad, 64 - pad):
            for j in range(pad, 64 - pad):
                window = mask.bits[i - pad : i + pad + 1, j - pad : j + pad + 1]
                hits[i, j] = not window.any()
        valid = hits & ~mask.bits
        ref = uniform_window_ssim(ya, yb, valid)
        assert score.ssim == pytest.approx(ref, rel=2e-5)

    def test_ssim_symmetry(self):
        a = textured_image(12)
        b = textured_image(13)
        params = plain_params()
        empty = diff_mask(a, a, CENTER_BOX, params)
        s_ab = scene_scores(a, b, empty, params).ssim
        s_ba = scene_scores(b, a, empty, params).ssim
        assert s_ab == pytest.approx(s_ba, rel=1e-12)

    def test_global_rerender_scores_are_terrible(self):
        base = textured_image(14, h=96, w=96)
        noise = mock_perturb(base, GlobalRerender(seed=3))
        params = plain_params()
        empty_mask = ChangeMask(
            bits=np.zeros((96, 96), bool), area_fraction=0.0, blob_count=0, anchored=False
        )
        score = scene_scores(base, noise, empty_mask, params)
        assert score.norm_mae > 7.0 * 2
        assert score.ssim < 0.5


class TestGate:
    MASK_OK = MaskSummary(area_fraction=0.1, blob_count=1, anchored=True)
    MASK_HUGE = MaskSummary(area_fraction=0.71, blob_count=1, anchored=True)

    def score(self, raw=1.0, norm=1.0, ssim=0.99) -> SceneScore:
        return SceneScore(raw_mae=raw, norm_mae=norm, ssim=ssim, scored_pixel_count=100)

    def test_day_norm_arm_inclusive(self):
        verdict = gate(self.score(norm=7.0, ssim=0.80), self.MASK_OK, DayNight.DAY, QcParams())
        assert verdict.passed and verdict.gate_path is GatePath.NORM_MAE_ONLY

    def test_day_both_arms_fail(self):
        verdict = gate(self.score(norm=8.0, ssim=0.84), self.MASK_OK, DayNight.DAY, QcParams())
        assert not verdict.passed
        assert verdict.reason is GateReason.DAY_GATE_FAIL
        assert verdict.gate_path is GatePath.NONE

    def test_day_ssim_arm_inclusive(self):
        verdict = gate(self.score(norm=8.0, ssim=0.85), self.MASK_OK, DayNight.DAY, QcParams())
        assert verdict.passed and verdict.gate_path is GatePath.SSIM_ONLY

    def test_day_both(self):
        verdict = gate(self.score(norm=6.9, ssim=0.86), self.MASK_OK, DayNight.DAY, QcParams())
        assert verdict.passed and verdict.gate_path is GatePath.BOTH

    def test_night_boundary(self):
        ok = gate(self.score(raw=5.0), self.MASK_OK, DayNight.NIGHT, QcParams())
        assert ok.passed and ok.gate_path is GatePath.NIGHT_MAE
        bad = gate(self.score(raw=5.01), self.MASK_OK, DayNight.NIGHT, QcParams())
        assert not bad.passed and bad.reason is GateReason.NIGHT_GATE_FAIL

    def test_global_rerender_overrides_good_scores(self):
        for day_night in (DayNight.DAY, DayNight.NIGHT):
            verdict = gate(self.score(), self.MASK_HUGE, day_night, QcParams())
            assert not verdict.passed
            assert verdict.reason is GateReason.GLOBAL_RERENDER
            assert verdict.gate_path is GatePath.NONE

    def test_area_bound_inclusive(self):
        at_bound = MaskSummary(area_fraction=0.70, blob_count=1, anchored=True)
        verdict = gate(self.score(), at_bound, DayNight.DAY, QcParams())
        assert verdict.passed  # 0.70 is not > 0.70

    def test_monotone_in_day_scores(self):
        rng = np.random.Generator(np.random.PCG64(21))
        params = QcParams()
        for _ in range(300):
            norm = float(rng.uniform(0, 15))
            ssim = float(rng.uniform(-1, 1))
            base = gate(self.score(norm=norm, ssim=ssim), self.MASK_OK, DayNight.DAY, params)
            better = gate(
                self.score(norm=norm * 0.7, ssim=min(1.0, ssim + 0.1)),
                self.MASK_OK,
                DayNight.DAY,
                params,
            )
            if base.passed:
                assert better.passed


class TestEvaluatePair:
    def test_identity_day_passes_both(self):
        img = textured_image(15)
        verdict = evaluate_pair(img, img, CENTER_BOX, DayNight.DAY, plain_params())
        assert verdict.passed
        assert verdict.gate_path is GatePath.BOTH
        assert verdict.mask.blob_count == 0

    def test_identity_night_passes_night_mae(self):
        img = textured_image(16)
        verdict = evaluate_pair(img, img, CENTER_BOX, DayNight.NIGHT, plain_params())
        assert verdict.passed
        assert verdict.gate_path is GatePath.NIGHT_MAE

    def test_in_box_edit_scene_untouched(self):
        # Dilation radius 10 separates scene pixels from every changed
        # pixel by more than the blur reach, so scene scores must equal
        # the identity pair's scores exactly.
        base = textured_image(17, h=128, w=128)
        bbox = BBox(0.35, 0.35, 0.25, 0.25)
        edited = mock_perturb(base, InBoxEdit(bbox, texture_amp=60, seed=9))
        params = plain_params(dilation_radius=10.0)
        verdict = evaluate_pair(base, edited, bbox, DayNight.DAY, params)
        assert verdict.passed
        assert verdict.gate_path is GatePath.BOTH
        assert verdict.score.raw_mae == 0.0
        assert verdict.score.norm_mae == 0.0
        assert verdict.score.ssim == 1.0

    def test_outside_patch_fails_scoring_not_masking(self):
        base = textured_image(18, h=128, w=128, low=30, high=120)
        bbox = BBox(0.05, 0.05, 0.15, 0.15)
        edited = mock_perturb(base, LocalPatch(rect=(56, 56, 64, 64), noise_amp=120, seed=4))
        params = plain_params()
        mask = diff_mask(base, edited, bbox, params)
        assert mask.blob_count == 0  # anchor rule discarded the patch
        day = evaluate_pair(base, edited, bbox, DayNight.DAY, params)
        night = evaluate_pair(base, edited, bbox, DayNight.NIGHT, params)
        assert not day.passed and day.reason is GateReason.DAY_GATE_FAIL
        assert not night.passed and night.reason is GateReason.NIGHT_GATE_FAIL
        # fixture certifies its own margins
        assert day.score.norm_mae > 8.5
        assert day.score.ssim < 0.82
        assert night.score.raw_mae > 6.0

    def test_global_rerender_rejected_by_area(self):
        base = textured_image(19, h=96, w=96)
        noise = mock_perturb(base, GlobalRerender(seed=7))
        verdict = evaluate_pair(base, noise, CENTER_BOX, DayNight.DAY, plain_params())
        assert not verdict.passed
        assert verdict.reason is GateReason.GLOBAL_RERENDER
        assert verdict.mask.area_fraction > 0.9

    def test_no_scene_pixels_reachable_with_image_denominator(self):
        # Margins thin the whole-image fraction below the bound while the
        # mask still covers every scored row.
        params = QcParams(
            edge_margin_fraction=0.1,
            mask_area_denominator="image",
            max_mask_fraction=0.85,
            dilation_radius=0.1,
        )
        base = flat_image(60, h=100, w=100)
        arr = base.data.copy()
        arr[10:90] = 200  # change every scored row
        edited = ImageBuffer(arr)
        verdict = evaluate_pair(base, edited, BBox(0.0, 0.0, 1.0, 1.0), DayNight.DAY, params)
        assert not verdict.passed
        assert verdict.reason is GateReason.NO_SCENE_PIXELS
        assert verdict.score is None


class TestQcParams:
    def test_fingerprint_tracks_parameters(self):
        base = QcParams().fingerprint()
        assert base == QcParams().fingerprint()
        assert QcParams(diff_threshold=13).fingerprint() != base
        assert QcParams(mask_area_denominator="image").fingerprint() != base
        assert len(base) == 12

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"diff_threshold": 0},
            {"max_mask_fraction": 1.0},
            {"ssim_window": 6},
            {"blur_sigma": 0.0},
            {"mask_area_denominator": "frame"},
            {"night_raw_mae_max": -1.0},
        ],
    )
    def test_invalid_params_rejected(self, kwargs):
        with pytest.raises(ValueError):
            QcParams(**kwargs)
