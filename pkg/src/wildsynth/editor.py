"""Phenotype variant planning and edit dispatch.

Each base image yields four variants: a sham negative control and three
phenotype edits across two severity axes (alopecia M0/M2/M3, body
condition B0/B2/B3). Prompts are instantiated from per-body-plan
template files and encode the detector box, severity descriptors,
species-appropriate lesion distribution, and a scene-preservation
clause. Edits go through a pluggable backend: a remote HTTP endpoint or
the deterministic mock used for testing and QC fixtures.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Callable, Optional, Protocol, Union

import cv2
import numpy as np
from PIL import Image

from .curation import BaseImageRecord
from .errors import (
    BackendError,
    GeometryError,
    TransientBackendError,
    UnknownSpeciesError,
)
from .ingest import BBox, DayNight, ImageBuffer
from .taxonomy import BODY_PLAN_BY_SPECIES, BodyPlan

logger = logging.getLogger(__name__)

# Returned images whose aspect ratio is within this of the base are
# resampled to base dimensions; anything else is rejected.
ASPECT_TOLERANCE = 0.02


class AlopeciaGrade(Enum):
    M0 = "M0"
    M2 = "M2"
    M3 = "M3"


class BodyGrade(Enum):
    B0 = "B0"
    B2 = "B2"
    B3 = "B3"


_ALLOWED_COMBOS = {
    (AlopeciaGrade.M0, BodyGrade.B0): "sham",
    (AlopeciaGrade.M2, BodyGrade.B0): "alopecia",
    (AlopeciaGrade.M0, BodyGrade.B2): "emaciated",
    (AlopeciaGrade.M3, BodyGrade.B3): "severe",
}


@dataclass(frozen=True)
class Severity:
    """One of the four generated combinations; anything else won't construct."""

    alopecia: AlopeciaGrade
    body: BodyGrade

    def __post_init__(self):
        if (self.alopecia, self.body) not in _ALLOWED_COMBOS:
            raise ValueError(
                f"unsupported severity combination {self.alopecia.value}/{self.body.value}"
            )

    @property
    def label(self) -> str:
        return _ALLOWED_COMBOS[(self.alopecia, self.body)]

    @property
    def code(self) -> str:
        return f"{self.alopecia.value}/{self.body.value}"


SHAM = Severity(AlopeciaGrade.M0, BodyGrade.B0)
ALOPECIA_ONLY = Severity(AlopeciaGrade.M2, BodyGrade.B0)
EMACIATED_ONLY = Severity(AlopeciaGrade.M0, BodyGrade.B2)
SEVERE_BOTH = Severity(AlopeciaGrade.M3, BodyGrade.B3)

VARIANT_ORDER = (SHAM, ALOPECIA_ONLY, EMACIATED_ONLY, SEVERE_BOTH)

SEVERITY_BY_LABEL = {sev.label: sev for sev in VARIANT_ORDER}


@dataclass(frozen=True)
class VariantSpec:
    base_image_id: str
    severity: Severity
    prompt: str
    order_index: int

    def __post_init__(self):
        if self.order_index not in (0, 1, 2, 3):
            raise ValueError(f"order_index out of range: {self.order_index}")
        if (self.order_index == 0) != (self.severity == SHAM):
            raise ValueError("the sham must sit at order_index 0, and only it")
        if not self.prompt:
            raise ValueError("prompt must be non-empty")

    @property
    def tag(self) -> str:
        return f"{self.base_image_id}/{self.order_index}"


@dataclass(frozen=True)
class EditResult:
    variant: VariantSpec
    image: ImageBuffer
    backend_id: str
    latency_ms: float


_ALOPECIA_DESC = {
    AlopeciaGrade.M2: "moderate patchy hair loss with scaling and crusting",
    AlopeciaGrade.M3: "severe extensive hair loss with hyperkeratotic plaques",
}

_BODY_DESC = {
    BodyGrade.B2: "visible ribs, noticeable muscle wasting",
    BodyGrade.B3: "severe emaciation with pronounced skeletal landmarks",
}

_PRESERVE_CLAUSE = (
    "Preserve the background, lighting, noise pattern, timestamp overlays, and "
    "camera-trap artifacts exactly; every pixel outside the animal must stay "
    "identical to the source frame."
)

_KEEP_COAT = "Keep the coat exactly as in the source frame: healthy and intact (M0)."
_KEEP_BODY = (
    "Keep the body condition exactly as in the source frame: healthy musculature (B0)."
)


def _distribution_clause(plan: BodyPlan, grade: AlopeciaGrade) -> str:
    if plan is BodyPlan.HOOFSTOCK:
        return (
            "Spare the dorsal midline beyond the shoulder blades along the spine; "
            "the animal cannot reach that area to scratch with teeth or hind hooves."
        )
    # Procyonids reuse the canid progression with face/tail emphasis.
    extremity = "elbows" if plan is BodyPlan.CANID else "tail"
    if grade is AlopeciaGrade.M2:
        return (
            "Place initial involvement at the face (particularly the periocular "
            f"region), the ear margins, and the {extremity}, extending to the "
            "flanks and legs at this moderate stage."
        )
    return (
        "Distribute the hair loss generalized across the body at this severe "
        "stage, including the face (particularly the periocular region), the ear "
        f"margins, and the {extremity}."
    )


def _load_template(plan: BodyPlan) -> str:
    return resources.files("wildsynth.templates").joinpath(f"{plan.value}.txt").read_text(
        encoding="utf-8"
    )


def template_version() -> str:
    """Content hash over all template files, recorded in the manifest."""
    digest = hashlib.sha256()
    for plan in BodyPlan:
        digest.update(_load_template(plan).encode())
    return digest.hexdigest()[:12]


def build_prompt(
    species: str, severity: Severity, bbox: BBox, day_night: DayNight
) -> str:
    """Instantiate the body-plan template for one variant. Pure."""
    plan = BODY_PLAN_BY_SPECIES.get(species)
    if plan is None:
        raise UnknownSpeciesError(f"species {species!r} not in taxonomy")
    if severity.alopecia is AlopeciaGrade.M0:
        alopecia_clause = _KEEP_COAT
    else:
        alopecia_clause = (
            f"Apply {_ALOPECIA_DESC[severity.alopecia]} ({severity.alopecia.value}). "
            f"{_distribution_clause(plan, severity.alopecia)}"
        )
    if severity.body is BodyGrade.B0:
        body_clause = _KEEP_BODY
    else:
        body_clause = f"Depict {_BODY_DESC[severity.body]} ({severity.body.value})."
    bbox_text = f"[x={bbox.x:.4f}, y={bbox.y:.4f}, w={bbox.w:.4f}, h={bbox.h:.4f}]"
    lighting = "daytime" if day_night is DayNight.DAY else "nighttime infrared"
    prompt = _load_template(plan).format(
        species=species,
        bbox=bbox_text,
        alopecia_clause=alopecia_clause,
        body_clause=body_clause,
        preserve_clause=_PRESERVE_CLAUSE,
    )
    return prompt + f"The frame is a {lighting} capture; match its rendering.\n"


def variant_plan(base: BaseImageRecord) -> list[VariantSpec]:
    """The four specs for one base, sham first."""
    if base.species not in BODY_PLAN_BY_SPECIES:
        raise UnknownSpeciesError(f"species {base.species!r} not in taxonomy")
    day_night = base.context.day_night or DayNight.DAY
    return [
        VariantSpec(
            base_image_id=base.image_id,
            severity=severity,
            prompt=build_prompt(base.species, severity, base.detection.bbox, day_night),
            order_index=index,
        )
        for index, severity in enumerate(VARIANT_ORDER)
    ]


# ---------------------------------------------------------------------------
# Mock perturbations (QC test oracle)


@dataclass(frozen=True)
class Identity:
    pass


@dataclass(frozen=True)
class DcShift:
    dr: int
    dg: int
    db: int


@dataclass(frozen=True)
class LocalPatch:
    rect: tuple[int, int, int, int]  # (x0, y0, w, h) in pixels
    noise_amp: int = 127
    seed: int = 0


@dataclass(frozen=True)
class InBoxEdit:
    bbox: BBox
    texture_amp: int = 40
    seed: int = 0


@dataclass(frozen=True)
class GlobalRerender:
    seed: int = 0


PerturbKind = Union[Identity, DcShift, LocalPatch, InBoxEdit, GlobalRerender]


def mock_perturb(image: ImageBuffer, kind: PerturbKind) -> ImageBuffer:
    """Deterministic perturbations with known footprints.

    DcShift adds a constant per channel (clamped). LocalPatch replaces a
    pixel rect with seeded noise around mid-gray. InBoxEdit textures only
    pixels inside the bbox, pushing each at least texture_amp/2 away from
    its value without ever clamping. GlobalRerender re-noises the frame.
    """
    if isinstance(kind, Identity):
        return ImageBuffer(image.data)
    if isinstance(kind, DcShift):
        shifted = image.data.astype(np.int16) + np.array(
            [kind.dr, kind.dg, kind.db], dtype=np.int16
        )
        return ImageBuffer(np.clip(shifted, 0, 255).astype(np.uint8))
    if isinstance(kind, LocalPatch):
        x0, y0, w, h = kind.rect
        if not (0 <= x0 and 0 <= y0 and w > 0 and h > 0
                and x0 + w <= image.width and y0 + h <= image.height):
            raise GeometryError(f"patch rect {kind.rect} outside {image.width}x{image.height}")
        if not 1 <= kind.noise_amp <= 127:
            raise GeometryError("noise_amp must be in [1, 127]")
        rng = np.random.Generator(np.random.PCG64(kind.seed))
        out = image.data.copy()
        noise = rng.integers(
            128 - kind.noise_amp, 128 + kind.noise_amp + 1, size=(h, w, 3)
        )
        out[y0 : y0 + h, x0 : x0 + w] = np.clip(noise, 0, 255).astype(np.uint8)
        return ImageBuffer(out)
    if isinstance(kind, InBoxEdit):
        if not 2 <= kind.texture_amp <= 127:
            raise GeometryError("texture_amp must be in [2, 127]")
        x0, y0, x1, y1 = kind.bbox.to_pixel_rect(image.width, image.height)
        rng = np.random.Generator(np.random.PCG64(kind.seed))
        out = image.data.copy()
        region = out[y0 : y1 + 1, x0 : x1 + 1].astype(np.int16)
        magnitude = rng.integers(
            kind.texture_amp // 2, kind.texture_amp + 1, size=region.shape
        )
        region += np.where(region < 128, magnitude, -magnitude).astype(np.int16)
        out[y0 : y1 + 1, x0 : x1 + 1] = region.astype(np.uint8)
        return ImageBuffer(out)
    if isinstance(kind, GlobalRerender):
        rng = np.random.Generator(np.random.PCG64(kind.seed))
        return ImageBuffer(
            rng.integers(0, 256, size=image.shape).astype(np.uint8)
        )
    raise TypeError(f"unknown perturbation kind: {kind!r}")


# ---------------------------------------------------------------------------
# Backends


class EditBackend(Protocol):
    backend_id: str

    def generate(self, image: ImageBuffer, prompt: str, tag: str = "") -> ImageBuffer:
        """Produce the edited frame; raise TransientBackendError to request a retry."""
        ...


class MockBackend:
    """Deterministic in-process backend.

    `mode` names the default perturbation; `script` maps a variant tag
    ("<base_image_id>/<order_index>") to a PerturbKind or an Exception
    instance to raise. Successful calls are counted and, when
    `call_log` is set, appended there one tag per line (fsynced), which
    lets kill/resume tests track exactly which calls were issued.
    """

    MODES: dict[str, Callable[[], PerturbKind]] = {
        "identity": Identity,
        "global-rerender": GlobalRerender,
    }

    def __init__(
        self,
        mode: str = "identity",
        script: Optional[dict[str, Union[PerturbKind, Exception]]] = None,
        call_log: Optional[str] = None,
        latency_s: float = 0.0,
    ):
        if mode not in self.MODES:
            raise ValueError(f"unknown mock mode {mode!r}")
        self.backend_id = f"mock:{mode}"
        self._default = self.MODES[mode]()
        self._script = dict(script or {})
        self._call_log = call_log
        self._latency_s = latency_s
        self._lock = threading.Lock()
        self.attempts = 0
        self.calls = 0

    def generate(self, image: ImageBuffer, prompt: str, tag: str = "") -> ImageBuffer:
        with self._lock:
            self.attempts += 1
        if self._latency_s:
            time.sleep(self._latency_s)
        action = self._script.get(tag, self._default)
        if isinstance(action, Exception):
            raise action
        result = mock_perturb(image, action)
        with self._lock:
            self.calls += 1
            if self._call_log:
                with open(self._call_log, "a", encoding="utf-8") as fh:
                    fh.write(tag + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
        return result


class RemoteBackend:
    """HTTP endpoint taking (PNG bytes, prompt) and returning PNG bytes.

    Request body: JSON {"prompt": ..., "image_png_b64": ...}; response:
    JSON {"image_png_b64": ...}. The bearer token comes from the
    environment and never reaches the logs.
    """

    def __init__(
        self,
        url: str,
        token_env: str = "WILDSYNTH_BACKEND_TOKEN",
        timeout_s: float = 120.0,
    ):
        self.backend_id = f"remote:{url}"
        self._url = url
        self._token_env = token_env
        self._timeout_s = timeout_s

    def generate(self, image: ImageBuffer, prompt: str, tag: str = "") -> ImageBuffer:
        body = json.dumps(
            {"prompt": prompt, "image_png_b64": _png_b64(image)}
        ).encode()
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self._token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        request = urllib.request.Request(self._url, data=body, headers=headers)
        try:
            with urllib.request.urlopen(request, timeout=self._timeout_s) as resp:
                payload = json.loads(resp.read())
        except urllib.error.HTTPError as exc:
            if exc.code >= 500:
                raise TransientBackendError(f"{tag}: HTTP {exc.code}") from exc
            raise BackendError(f"{tag}: HTTP {exc.code}") from exc
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise TransientBackendError(f"{tag}: transport failure: {exc}") from exc
        try:
            raw = base64.b64decode(payload["image_png_b64"])
            with Image.open(io.BytesIO(raw)) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except (KeyError, ValueError, OSError) as exc:
            raise BackendError(f"{tag}: unusable response payload: {exc}") from exc
        return ImageBuffer(arr)


def _png_b64(image: ImageBuffer) -> str:
    buf = io.BytesIO()
    Image.fromarray(image.data).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


@dataclass(frozen=True)
class RetryPolicy:
    """Retries cover transport/5xx-class failures only; 4xx is permanent."""

    attempts: int = 3
    backoffs_s: tuple[float, ...] = (1.0, 4.0, 16.0)

    def __post_init__(self):
        if self.attempts < 1 or not self.backoffs_s:
            raise ValueError("need at least one attempt and one backoff")


def edit(
    base_image: ImageBuffer,
    spec: VariantSpec,
    backend: EditBackend,
    retry: RetryPolicy = RetryPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> EditResult:
    """Run one edit through the backend and normalize its geometry.

    A returned frame of different size is resampled to the base
    dimensions when the aspect ratio matches within 2%, and rejected
    otherwise: QC needs pixel alignment, and reshapes are not
    recoverable.
    """
    started = time.perf_counter()
    out: Optional[ImageBuffer] = None
    for attempt in range(retry.attempts):
        try:
            out = backend.generate(base_image, spec.prompt, tag=spec.tag)
            break
        except TransientBackendError as exc:
            if attempt + 1 >= retry.attempts:
                raise BackendError(
                    f"{spec.tag}: gave up after {retry.attempts} attempts: {exc}"
                ) from exc
            pause = retry.backoffs_s[min(attempt, len(retry.backoffs_s) - 1)]
            logger.warning("%s: transient backend failure, retrying in %.0fs", spec.tag, pause)
            sleep(pause)
    latency_ms = (time.perf_counter() - started) * 1000.0
    out = _normalize_geometry(base_image, out, spec.tag)
    logger.info(
        "edit %s via %s in %.1f ms", spec.tag, backend.backend_id, latency_ms
    )
    return EditResult(
        variant=spec, image=out, backend_id=backend.backend_id, latency_ms=latency_ms
    )


def _normalize_geometry(base: ImageBuffer, out: ImageBuffer, tag: str) -> ImageBuffer:
    if out.shape == base.shape:
        return out
    aspect_base = base.width / base.height
    aspect_out = out.width / out.height
    if abs(aspect_out / aspect_base - 1.0) > ASPECT_TOLERANCE:
        raise GeometryError(
            f"{tag}: backend returned {out.width}x{out.height}, aspect "
            f"incompatible with base {base.width}x{base.height}"
        )
    resized = cv2.resize(
        out.data, (base.width, base.height), interpolation=cv2.INTER_LINEAR
    )
    return ImageBuffer(resized)
