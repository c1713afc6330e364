"""Scene-drift quality control.

The decision is decoupled into two stages. A change mask is built from
raw pixel differences: thresholded, connected-component labeled, small
blobs dropped as compression noise, surviving blobs kept only when they
touch the detector box, and the result dilated. Scene quality is then
scored on Gaussian-blurred pixels outside that mask (raw MAE,
DC-corrected MAE, and SSIM on luma), and an adaptive gate applies
day/night thresholds plus a global-re-render area bound.

All operations are pure; image pairs are independent work units and can
be processed from any number of workers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional

import cv2
import numpy as np

from .errors import NoScenePixelsError, QcGeometryError
from .ingest import BBox, DayNight, ImageBuffer

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_DYNAMIC_RANGE = 255.0

# Filter taps are quantized to multiples of 2^-40 and re-centered so they
# sum to exactly 1.0; a constant offset between two frames then survives
# the blur bit-exactly, which keeps the DC-removal identity exact.
_KERNEL_QUANTUM_BITS = 40
_KERNEL_TRUNCATE = 3.0


class GateReason(Enum):
    PASS = "pass"
    GLOBAL_RERENDER = "global_rerender"
    DAY_GATE_FAIL = "day_gate_fail"
    NIGHT_GATE_FAIL = "night_gate_fail"
    NO_SCENE_PIXELS = "no_scene_pixels"


class GatePath(Enum):
    NORM_MAE_ONLY = "norm_mae_only"
    SSIM_ONLY = "ssim_only"
    BOTH = "both"
    NIGHT_MAE = "night_mae"
    NONE = "none"


@dataclass(frozen=True)
class QcParams:
    """Thresholds and geometry for mask construction and scoring.

    dilation_radius is normally derived per image as
    max(5 px, 2% of the diagonal); set it explicitly to pin a value.
    mask_area_denominator selects whether the re-render bound is taken
    over the scored region (default, consistent with scoring geometry)
    or the whole image.
    """

    diff_threshold: int = 12
    min_blob_fraction: float = 0.0005
    dilation_radius: Optional[float] = None
    max_mask_fraction: float = 0.70
    edge_margin_fraction: float = 0.06
    blur_sigma: float = 2.0
    ssim_window: int = 7
    day_norm_mae_max: float = 7.0
    day_ssim_min: float = 0.85
    night_raw_mae_max: float = 5.0
    mask_area_denominator: str = "scored"

    def __post_init__(self):
        if self.diff_threshold <= 0 or self.min_blob_fraction <= 0:
            raise ValueError("diff_threshold and min_blob_fraction must be positive")
        if not 0.0 < self.max_mask_fraction < 1.0:
            raise ValueError("max_mask_fraction must lie in (0, 1)")
        if self.blur_sigma <= 0 or self.edge_margin_fraction < 0:
            raise ValueError("blur_sigma must be positive, edge margin non-negative")
        if self.ssim_window % 2 != 1 or self.ssim_window < 3:
            raise ValueError("ssim_window must be odd and >= 3")
        if min(self.day_norm_mae_max, self.day_ssim_min, self.night_raw_mae_max) <= 0:
            raise ValueError("gate thresholds must be positive")
        if self.mask_area_denominator not in ("scored", "image"):
            raise ValueError("mask_area_denominator must be 'scored' or 'image'")

    def dilation_radius_for(self, width: int, height: int) -> float:
        if self.dilation_radius is not None:
            return self.dilation_radius
        return max(5.0, 0.02 * float(np.hypot(width, height)))

    def margin_rows(self, height: int) -> int:
        return int(self.edge_margin_fraction * height)

    def fingerprint(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class Blob:
    """One connected component as row runs (row, col_start, col_end), inclusive."""

    runs: tuple[tuple[int, int, int], ...]
    area: int

    def intersects_rect(self, rect: tuple[int, int, int, int]) -> bool:
        x0, y0, x1, y1 = rect
        return any(y0 <= row <= y1 and s <= x1 and e >= x0 for row, s, e in self.runs)

    def paint(self, out: np.ndarray) -> None:
        for row, s, e in self.runs:
            out[row, s : e + 1] = True


@dataclass(frozen=True)
class MaskSummary:
    area_fraction: float
    blob_count: int
    anchored: bool


@dataclass(frozen=True)
class ChangeMask:
    """Dilated, bbox-anchored change mask plus its accounting stats."""

    bits: np.ndarray = field(repr=False)
    area_fraction: float
    blob_count: int
    anchored: bool

    def summary(self) -> MaskSummary:
        return MaskSummary(self.area_fraction, self.blob_count, self.anchored)


@dataclass(frozen=True)
class SceneScore:
    raw_mae: float
    norm_mae: float
    ssim: float
    scored_pixel_count: int


@dataclass(frozen=True)
class QcVerdict:
    passed: bool
    reason: GateReason
    gate_path: GatePath
    score: Optional[SceneScore]
    mask: MaskSummary


def connected_components(plane: np.ndarray, connectivity: int = 8) -> list[Blob]:
    """Label a binary plane into blobs with exact areas.

    Rows are encoded as runs, then a union-find merges runs that touch
    across adjacent rows (diagonal contact counts under 8-connectivity).
    Output order follows each blob's first run in row-major order.
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    plane = np.asarray(plane, dtype=bool)
    if plane.ndim != 2:
        raise ValueError("expected a 2-D binary plane")
    h, w = plane.shape
    padded = np.zeros((h, w + 2), dtype=np.int8)
    padded[:, 1:-1] = plane
    steps = np.diff(padded, axis=1)
    start_rows, start_cols = np.nonzero(steps == 1)
    _, end_cols = np.nonzero(steps == -1)
    end_cols = end_cols - 1  # inclusive

    n = len(start_rows)
    if n == 0:
        return []
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]  # path halving
            i = parent[i]
        return i

    def union(i: int, j: int) -> None:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    # Runs arrive sorted by (row, col); group them per row.
    row_bounds = np.searchsorted(start_rows, np.arange(h + 1))
    reach = 1 if connectivity == 8 else 0
    for row in range(1, h):
        i, i_end = row_bounds[row - 1], row_bounds[row]
        j, j_end = row_bounds[row], row_bounds[row + 1]
        while i < i_end and j < j_end:
            if start_cols[i] <= end_cols[j] + reach and start_cols[j] <= end_cols[i] + reach:
                union(i, j)
            if end_cols[i] < end_cols[j]:
                i += 1
            else:
                j += 1

    grouped: dict[int, list[tuple[int, int, int]]] = {}
    for idx in range(n):
        grouped.setdefault(find(idx), []).append(
            (int(start_rows[idx]), int(start_cols[idx]), int(end_cols[idx]))
        )
    blobs = [
        Blob(runs=tuple(runs), area=sum(e - s + 1 for _, s, e in runs))
        for _, runs in sorted(grouped.items())
    ]
    return blobs


def labels_from_blobs(shape: tuple[int, int], blobs: list[Blob]) -> np.ndarray:
    """Label plane (0 = background, 1..k = blobs) for a blob list."""
    out = np.zeros(shape, dtype=np.int32)
    for label, blob in enumerate(blobs, start=1):
        for row, s, e in blob.runs:
            out[row, s : e + 1] = label
    return out


def diff_mask(
    original: ImageBuffer, edited: ImageBuffer, bbox: BBox, params: QcParams
) -> ChangeMask:
    """Animal-anchored change mask from raw pixel differences.

    A pixel counts as changed when the max channel difference exceeds
    diff_threshold. Blobs below min_blob_fraction of the image area are
    dropped as compression noise; the rest survive only if they overlap
    the detector box. The surviving mask is dilated by a disk, and the
    top/bottom edge margins are excluded from area accounting.
    """
    if original.shape != edited.shape:
        raise QcGeometryError(
            f"image pair dimensions differ: {original.shape} vs {edited.shape}"
        )
    h, w = original.height, original.width
    d = cv2.absdiff(original.data, edited.data)
    ch = cv2.split(d)
    changed = np.maximum(np.maximum(ch[0], ch[1]), ch[2]) > params.diff_threshold

    blobs = _components_cropped(changed)
    min_area = params.min_blob_fraction * (h * w)
    rect = bbox.to_pixel_rect(w, h)
    retained = [b for b in blobs if b.area >= min_area and b.intersects_rect(rect)]

    mask = np.zeros((h, w), dtype=bool)
    for blob in retained:
        blob.paint(mask)
    mask = _dilate_disk(mask, params.dilation_radius_for(w, h))
    mask.setflags(write=False)

    margin = params.margin_rows(h)
    scored_rows = slice(margin, h - margin)
    if params.mask_area_denominator == "scored":
        denom = max(1, (h - 2 * margin) * w)
        numer = int(np.count_nonzero(mask[scored_rows]))
    else:
        denom = h * w
        numer = int(np.count_nonzero(mask))
    return ChangeMask(
        bits=mask,
        area_fraction=numer / denom,
        blob_count=len(retained),
        anchored=bool(retained),
    )


def _components_cropped(changed: np.ndarray) -> list[Blob]:
    """connected_components restricted to the changed bounding box.

    Components cannot extend past the extent of their set pixels, so
    labeling the tight crop and shifting the runs back is exact.
    """
    rows = np.flatnonzero(changed.any(axis=1))
    if rows.size == 0:
        return []
    cols = np.flatnonzero(changed.any(axis=0))
    r0, c0 = int(rows[0]), int(cols[0])
    crop = changed[r0 : rows[-1] + 1, c0 : cols[-1] + 1]
    blobs = connected_components(crop, connectivity=8)
    if r0 == 0 and c0 == 0:
        return blobs
    return [
        Blob(
            runs=tuple((row + r0, s + c0, e + c0) for row, s, e in blob.runs),
            area=blob.area,
        )
        for blob in blobs
    ]


def _dilate_disk(mask: np.ndarray, radius: float) -> np.ndarray:
    """Exact Euclidean dilation by a disk, via a distance transform.

    Restricted to the mask's bounding box padded by the radius; outside
    it the distance to the mask exceeds the radius by construction.
    """
    if not mask.any():
        return mask.copy()
    h, w = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    pad = int(np.ceil(radius)) + 1
    r0, r1 = max(0, rows[0] - pad), min(h, rows[-1] + 1 + pad)
    c0, c1 = max(0, cols[0] - pad), min(w, cols[-1] + 1 + pad)
    sub = mask[r0:r1, c0:c1]
    src = np.where(sub, 0, 255).astype(np.uint8)
    dist = cv2.distanceTransform(src, cv2.DIST_L2, cv2.DIST_MASK_PRECISE)
    out = np.zeros_like(mask)
    out[r0:r1, c0:c1] = dist <= radius
    return out


def gaussian_taps(sigma: float) -> np.ndarray:
    """Normalized Gaussian taps, truncated at 3 sigma, exact unit sum."""
    radius = int(_KERNEL_TRUNCATE * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    taps /= taps.sum()
    scale = float(2**_KERNEL_QUANTUM_BITS)
    taps = np.round(taps * scale) / scale
    taps[radius] += 1.0 - taps.sum()
    return taps


def gaussian_blur(plane: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur to float64, mirrored borders."""
    taps = gaussian_taps(sigma)
    return cv2.sepFilter2D(
        plane, cv2.CV_64F, taps, taps, borderType=cv2.BORDER_REFLECT_101
    )


def blurred_luma(image: ImageBuffer, sigma: float) -> np.ndarray:
    """Gaussian-blurred ITU-R 601 luma plane (single precision)."""
    luma = cv2.cvtColor(image.data.astype(np.float32), cv2.COLOR_RGB2GRAY)
    taps = gaussian_taps(sigma)
    return cv2.sepFilter2D(
        luma, cv2.CV_32F, taps, taps, borderType=cv2.BORDER_REFLECT_101
    )


def scene_scores(
    original: ImageBuffer, edited: ImageBuffer, mask: ChangeMask, params: QcParams
) -> SceneScore:
    """Raw MAE, DC-corrected MAE, and luma SSIM over blurred scene pixels.

    Scene pixels lie outside the dilated mask and outside the edge
    margins. MAE runs in double precision so a constant offset survives
    DC removal exactly. The SSIM mean covers scene pixels whose full
    window fits in the frame and avoids the mask; with no such window
    the SSIM reports -1.0 (worst case) and the verdict rests on the MAE
    arm.
    """
    if original.shape != edited.shape:
        raise QcGeometryError(
            f"image pair dimensions differ: {original.shape} vs {edited.shape}"
        )
    h, w = original.height, original.width
    margin = params.margin_rows(h)
    scene = ~mask.bits
    if margin:
        scene[:margin] = False
        scene[h - margin :] = False
    count = int(np.count_nonzero(scene))
    if count == 0:
        raise NoScenePixelsError("mask and margins cover the entire frame")

    raw_mae, norm_mae = _blurred_mae(original, edited, scene, count, params)

    ssim = _masked_ssim(original, edited, mask.bits, scene, params)
    return SceneScore(
        raw_mae=raw_mae, norm_mae=norm_mae, ssim=ssim, scored_pixel_count=count
    )


def _blurred_mae(
    original: ImageBuffer,
    edited: ImageBuffer,
    scene: np.ndarray,
    count: int,
    params: QcParams,
) -> tuple[float, float]:
    """Raw and DC-corrected MAE of the blurred per-channel differences.

    Differencing before the blur is exact by linearity of convolution,
    and the blurred difference is exactly zero outside the changed
    region's bounding box grown by twice the kernel reach (every tap
    reads a zero, and mirrored borders there reflect zeros onto zeros).
    Only that crop is blurred; scene pixels outside it contribute 0 to
    the raw sum and |dc| each to the DC-corrected sum. Masked sums run
    as dot products against a 0/1 vector: exact, since every term is
    x*1.0 or x*0.0.
    """
    h, w = original.height, original.width
    absd = cv2.absdiff(original.data, edited.data)
    ch = cv2.split(absd)
    active = np.maximum(np.maximum(ch[0], ch[1]), ch[2])
    act_rows = np.flatnonzero(active.any(axis=1))
    if act_rows.size == 0:
        return 0.0, 0.0
    act_cols = np.flatnonzero(active.any(axis=0))
    guard = 2 * (len(gaussian_taps(params.blur_sigma)) // 2)
    r0, r1 = max(0, act_rows[0] - guard), min(h, act_rows[-1] + 1 + guard)
    c0, c1 = max(0, act_cols[0] - guard), min(w, act_cols[-1] + 1 + guard)
    signed = cv2.subtract(
        np.ascontiguousarray(original.data[r0:r1, c0:c1]),
        np.ascontiguousarray(edited.data[r0:r1, c0:c1]),
        dtype=cv2.CV_16S,
    )
    scene_crop = scene[r0:r1, c0:c1]
    picker = np.where(scene_crop.ravel(), 1.0, 0.0)
    outside = count - int(np.count_nonzero(scene_crop))
    abs_buf = np.empty(picker.size, dtype=np.float64)
    abs_total = 0.0
    centered_total = 0.0
    for plane in cv2.split(signed):
        d = gaussian_blur(plane, params.blur_sigma).ravel()
        np.abs(d, out=abs_buf)
        abs_total += float(abs_buf @ picker)
        dc = float(d @ picker) / count
        d -= dc
        np.abs(d, out=abs_buf)
        centered_total += float(abs_buf @ picker) + abs(dc) * outside
    return abs_total / (3 * count), centered_total / (3 * count)


def _masked_ssim(
    original: ImageBuffer,
    edited: ImageBuffer,
    mask_bits: np.ndarray,
    scene: np.ndarray,
    params: QcParams,
) -> float:
    win = params.ssim_window
    pad = win // 2
    h, w = original.height, original.width
    ya = blurred_luma(original, params.blur_sigma)
    yb = blurred_luma(edited, params.blur_sigma)
    mask_any = bool(mask_bits.any())
    if mask_any:
        # No-op for the windows we keep (they never touch the mask), but
        # it makes the box-filter scan histories identical wherever the
        # frames agree, so matching content scores exactly alike.
        ya[mask_bits] = 0.0
        yb[mask_bits] = 0.0

    def box(img: np.ndarray) -> np.ndarray:
        return cv2.boxFilter(img, cv2.CV_32F, (win, win), normalize=True)

    mu_a = box(ya)
    mu_b = box(yb)
    mu_ab = mu_a * mu_b
    mu_a2 = mu_a * mu_a
    mu_b2 = mu_b * mu_b
    # Sample-covariance scaling k = N/(N-1) cancels in the second SSIM
    # factor when the stabilizer is divided by k instead.
    var_a = box(ya * ya) - mu_a2
    var_b = box(yb * yb) - mu_b2
    cov = box(ya * yb) - mu_ab
    c1 = np.float32((SSIM_K1 * SSIM_DYNAMIC_RANGE) ** 2)
    c2k = np.float32(
        (SSIM_K2 * SSIM_DYNAMIC_RANGE) ** 2 * (win * win - 1.0) / (win * win)
    )
    ssim_map = ((2.0 * mu_ab + c1) * (2.0 * cov + c2k)) / (
        (mu_a2 + mu_b2 + c1) * (var_a + var_b + c2k)
    )

    if mask_any:
        window_hits = cv2.boxFilter(
            mask_bits.view(np.uint8), cv2.CV_32S, (win, win), normalize=False
        )
        valid = scene & (window_hits == 0)
    else:
        valid = scene.copy()
    valid[:pad] = False
    valid[h - pad :] = False
    valid[:, :pad] = False
    valid[:, w - pad :] = False
    n_valid = int(np.count_nonzero(valid))
    if n_valid == 0:
        return -1.0
    return float(np.sum(ssim_map, where=valid, dtype=np.float64)) / n_valid


def gate(
    score: Optional[SceneScore],
    mask: ChangeMask | MaskSummary,
    day_night: DayNight,
    params: QcParams,
) -> QcVerdict:
    """Apply the area bound and day/night thresholds (all inclusive).

    Day passes when norm MAE <= day_norm_mae_max OR SSIM >= day_ssim_min,
    recording which arm(s) held; night requires raw MAE <=
    night_raw_mae_max. A mask fraction above max_mask_fraction rejects
    the pair as a global re-render regardless of scores.
    """
    summary = mask.summary() if isinstance(mask, ChangeMask) else mask
    if summary.area_fraction > params.max_mask_fraction:
        return QcVerdict(False, GateReason.GLOBAL_RERENDER, GatePath.NONE, score, summary)
    if score is None:
        return QcVerdict(False, GateReason.NO_SCENE_PIXELS, GatePath.NONE, None, summary)
    if day_night is DayNight.DAY:
        norm_ok = score.norm_mae <= params.day_norm_mae_max
        ssim_ok = score.ssim >= params.day_ssim_min
        if norm_ok and ssim_ok:
            return QcVerdict(True, GateReason.PASS, GatePath.BOTH, score, summary)
        if norm_ok:
            return QcVerdict(True, GateReason.PASS, GatePath.NORM_MAE_ONLY, score, summary)
        if ssim_ok:
            return QcVerdict(True, GateReason.PASS, GatePath.SSIM_ONLY, score, summary)
        return QcVerdict(False, GateReason.DAY_GATE_FAIL, GatePath.NONE, score, summary)
    if score.raw_mae <= params.night_raw_mae_max:
        return QcVerdict(True, GateReason.PASS, GatePath.NIGHT_MAE, score, summary)
    return QcVerdict(False, GateReason.NIGHT_GATE_FAIL, GatePath.NONE, score, summary)


def evaluate_pair(
    original: ImageBuffer,
    edited: ImageBuffer,
    bbox: BBox,
    day_night: DayNight,
    params: QcParams = QcParams(),
) -> QcVerdict:
    """Full QC decision for one original/edit pair.

    Scoring is skipped when the mask already exceeds the re-render
    bound (the verdict cannot change) or covers every scene pixel.
    """
    mask = diff_mask(original, edited, bbox, params)
    if mask.area_fraction > params.max_mask_fraction:
        return gate(None, mask, day_night, params)
    try:
        score = scene_scores(original, edited, mask, params)
    except NoScenePixelsError:
        return QcVerdict(
            False, GateReason.NO_SCENE_PIXELS, GatePath.NONE, None, mask.summary()
        )
    return gate(score, mask, day_night, params)
