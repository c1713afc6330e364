from __future__ import annotations

from datetime import datetime

import numpy as np
import pytest

from wildsynth.curation import BaseImageRecord, placement_weight
from wildsynth.ingest import (
    BBox,
    CaptureContext,
    Category,
    DayNight,
    DetectionRecord,
    ImageBuffer,
)


def flat_image(value: int = 100, h: int = 64, w: int = 64) -> ImageBuffer:
    return ImageBuffer(np.full((h, w, 3), value, dtype=np.uint8))


def textured_image(seed: int = 0, h: int = 64, w: int = 64, low: int = 40, high: int = 216) -> ImageBuffer:
    """Smooth mid-range texture: headroom for shifts, structure for SSIM."""
    rng = np.random.Generator(np.random.PCG64(seed))
    base = rng.integers(low, high, size=(h // 8 + 1, w // 8 + 1, 3))
    big = np.kron(base, np.ones((8, 8, 1)))[:h, :w]
    ripple = (8 * np.sin(np.arange(w) / 3.0))[None, :, None]
    out = np.clip(big + ripple, low, high).astype(np.uint8)
    return ImageBuffer(out)


def make_base(
    image_id: str = "img_000.jpg",
    species: str = "gray fox",
    bbox: BBox = BBox(0.4, 0.4, 0.2, 0.2),
    confidence: float = 0.9,
    day_night: DayNight | None = DayNight.DAY,
    timestamp: datetime | None = None,
) -> BaseImageRecord:
    detection = DetectionRecord(
        image_id=image_id, bbox=bbox, confidence=confidence, category=Category.ANIMAL
    )
    context = CaptureContext(species=species, timestamp=timestamp, day_night=day_night)
    return BaseImageRecord(
        image_id=image_id,
        species=species,
        detection=detection,
        context=context,
        placement_weight=placement_weight(bbox),
    )


@pytest.fixture
def base_record() -> BaseImageRecord:
    return make_base()
