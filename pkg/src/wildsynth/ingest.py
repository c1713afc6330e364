"""Parse detector output and image metadata into typed records.

Detector files follow the common batch-output layout: a top-level
``images`` array whose entries carry a ``file`` name and a list of
``detections`` with normalized ``[x, y, w, h]`` boxes. Category codes
map "1" to animal, "2" to person, "3" to vehicle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import EmptyFileError, MalformedFileError

BBOX_EDGE_EPS = 1e-6

# Mean cross-channel standard deviation (8-bit units) below which a frame
# is treated as IR/grayscale. JPEG chroma noise on grayscale content stays
# under this.
DEFAULT_CHROMA_THRESHOLD = 2.0

# SSIM windows and blur kernels degenerate below this edge length.
MIN_IMAGE_EDGE = 64

EXIF_DATETIME_ORIGINAL = 0x9003

CATEGORY_CODES = {"1": "animal", "2": "person", "3": "vehicle"}


class Category(Enum):
    ANIMAL = "animal"
    PERSON = "person"
    VEHICLE = "vehicle"


class DayNight(Enum):
    DAY = "day"
    NIGHT = "night"


class Season(Enum):
    WINTER = "winter"
    SPRING = "spring"
    SUMMER = "summer"
    FALL = "fall"


@dataclass(frozen=True)
class BBox:
    """Normalized detector box: top-left origin, fractions of image size."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.x >= 0 and self.y >= 0):
            raise ValueError(f"bbox origin out of range: {self}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"bbox extent must be positive: {self}")
        if self.x + self.w > 1 + BBOX_EDGE_EPS or self.y + self.h > 1 + BBOX_EDGE_EPS:
            raise ValueError(f"bbox exceeds frame: {self}")

    @property
    def centroid(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def to_pixel_rect(self, width: int, height: int) -> tuple[int, int, int, int]:
        """Covering pixel rect as (x0, y0, x1, y1), inclusive bounds."""
        x0 = max(0, int(np.floor(self.x * width)))
        y0 = max(0, int(np.floor(self.y * height)))
        x1 = min(width - 1, int(np.ceil((self.x + self.w) * width)) - 1)
        y1 = min(height - 1, int(np.ceil((self.y + self.h) * height)) - 1)
        return x0, y0, x1, y1


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    bbox: BBox
    confidence: float
    category: Category

    def __post_init__(self):
        if not self.image_id:
            raise ValueError("image_id must be non-empty")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence out of range: {self.confidence}")


class ImageBuffer:
    """Immutable 8-bit RGB frame.

    Wraps a read-only (H, W, 3) uint8 array. Frames smaller than
    64x64 are rejected because the QC blur and SSIM windows become
    degenerate on them.
    """

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            raise ValueError(f"expected (H, W, 3) uint8 array, got {arr.shape} {arr.dtype}")
        if arr.shape[0] < MIN_IMAGE_EDGE or arr.shape[1] < MIN_IMAGE_EDGE:
            raise ValueError(
                f"image {arr.shape[1]}x{arr.shape[0]} below minimum {MIN_IMAGE_EDGE}x{MIN_IMAGE_EDGE}"
            )
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("ImageBuffer is immutable")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other) -> bool:
        return isinstance(other, ImageBuffer) and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class CaptureContext:
    """Per-image metadata; season is derived from the timestamp when present."""

    species: str
    timestamp: Optional[datetime] = None
    day_night: Optional[DayNight] = None
    day_night_source: Optional[str] = None  # "metadata" | "heuristic"
    season: Optional[Season] = field(default=None, init=False)
    location_id: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(
            self, "season", derive_season(self.timestamp) if self.timestamp else None
        )


@dataclass(frozen=True)
class DetectionParse:
    """parse_detections output: records in file order plus non-fatal warnings."""

    records: list[DetectionRecord]
    warnings: list[str]


def parse_detections(detector_file: bytes) -> DetectionParse:
    """Parse a detector batch-output document.

    Malformed per-detection entries are dropped with a warning; an
    unparseable document or one with zero images is fatal.
    """
    try:
        doc = json.loads(detector_file)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedFileError(f"detector file is not valid JSON: {exc}") from exc
    images = doc.get("images") if isinstance(doc, dict) else None
    if not isinstance(images, list):
        raise MalformedFileError("detector file lacks a top-level 'images' array")
    if len(images) == 0:
        raise EmptyFileError("detector file contains zero images")

    records: list[DetectionRecord] = []
    warnings: list[str] = []
    for i, entry in enumerate(images):
        if not isinstance(entry, dict) or not entry.get("file"):
            warnings.append(f"images[{i}]: missing 'file' field, skipped")
            continue
        image_id = str(entry["file"])
        detections = entry.get("detections")
        if detections is None:
            warnings.append(f"{image_id}: no 'detections' field, skipped")
            continue
        if not isinstance(detections, list):
            warnings.append(f"{image_id}: 'detections' is not a list, skipped")
            continue
        for j, det in enumerate(detections):
            try:
                records.append(_parse_detection(image_id, det))
            except (KeyError, TypeError, ValueError) as exc:
                warnings.append(f"{image_id} detections[{j}]: {exc}")
    return DetectionParse(records=records, warnings=warnings)


def _parse_detection(image_id: str, det: dict) -> DetectionRecord:
    code = str(det["category"])
    if code not in CATEGORY_CODES:
        raise ValueError(f"unknown category code {code!r}")
    bbox_vals = det["bbox"]
    if not isinstance(bbox_vals, (list, tuple)) or len(bbox_vals) != 4:
        raise ValueError(f"bbox must be [x, y, w, h], got {bbox_vals!r}")
    return DetectionRecord(
        image_id=image_id,
        bbox=BBox(*(float(v) for v in bbox_vals)),
        confidence=float(det["conf"]),
        category=Category(CATEGORY_CODES[code]),
    )


def serialize_detections(records: list[DetectionRecord]) -> bytes:
    """Inverse of parse_detections for well-formed records."""
    by_image: dict[str, list[DetectionRecord]] = {}
    order: list[str] = []
    for rec in records:
        if rec.image_id not in by_image:
            by_image[rec.image_id] = []
            order.append(rec.image_id)
        by_image[rec.image_id].append(rec)
    code_of = {Category(v): k for k, v in CATEGORY_CODES.items()}
    images = [
        {
            "file": image_id,
            "detections": [
                {
                    "category": code_of[r.category],
                    "conf": r.confidence,
                    "bbox": [r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h],
                }
                for r in by_image[image_id]
            ],
        }
        for image_id in order
    ]
    return json.dumps({"images": images}).encode()


def select_primary_detection(
    records: list[DetectionRecord],
    image_id: str,
    min_conf: float = 0.8,
) -> Optional[DetectionRecord]:
    """Highest-confidence animal detection for one image, or None.

    Ties on confidence break toward the smallest lexicographic
    (x, y) of the box, so the result is independent of input order.
    """
    if not 0.0 <= min_conf <= 1.0:
        raise ValueError(f"min_conf out of range: {min_conf}")
    candidates = [
        r
        for r in records
        if r.image_id == image_id
        and r.category is Category.ANIMAL
        and r.confidence >= min_conf
    ]
    if not candidates:
        return None
    return min(
        candidates,
        key=lambda r: (-r.confidence, r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h),
    )


def classify_day_night(
    image: ImageBuffer,
    context: CaptureContext,
    chroma_threshold: float = DEFAULT_CHROMA_THRESHOLD,
) -> DayNight:
    """Return the context flag when present, else a chroma heuristic.

    IR night frames are near-grayscale: the mean over pixels of the
    per-pixel standard deviation across the three channels falls below
    the threshold. Deterministic.
    """
    if context.day_night is not None:
        return context.day_night
    px = image.data.astype(np.float64)
    mean = px.mean(axis=2, keepdims=True)
    chroma = np.sqrt(((px - mean) ** 2).mean(axis=2)).mean()
    return DayNight.NIGHT if chroma < chroma_threshold else DayNight.DAY


def resolve_context(image: ImageBuffer, context: CaptureContext) -> CaptureContext:
    """Fill day_night (recording which path decided it) if unset."""
    if context.day_night is not None:
        source = context.day_night_source or "metadata"
        return replace(context, day_night_source=source)
    return replace(
        context,
        day_night=classify_day_night(image, context),
        day_night_source="heuristic",
    )


def derive_season(timestamp: datetime) -> Season:
    """Meteorological season by month (Northern Hemisphere)."""
    month = timestamp.month
    if month in (12, 1, 2):
        return Season.WINTER
    if month in (3, 4, 5):
        return Season.SPRING
    if month in (6, 7, 8):
        return Season.SUMMER
    return Season.FALL


def load_image(path: str | Path) -> ImageBuffer:
    """Decode an 8-bit JPEG/PNG to RGB; grayscale expands to 3 channels."""
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return ImageBuffer(np.asarray(rgb, dtype=np.uint8))


def read_exif_timestamp(path: str | Path) -> Optional[datetime]:
    """DateTimeOriginal from EXIF, if present and parseable."""
    with Image.open(path) as im:
        exif = im.getexif()
        raw = exif.get(EXIF_DATETIME_ORIGINAL) or exif.get(306)  # 306 = DateTime
    if not raw:
        return None
    try:
        return datetime.strptime(str(raw), "%Y:%m:%d %H:%M:%S")
    except ValueError:
        return None
