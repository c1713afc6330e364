"""Per-base state machine and run driver.

Each base image runs sham-first: the negative control is generated and
QC'd before any phenotype variant, and a sham rejection skips the
remaining three variants (an irrecoverable scene costs one call instead
of four). Every step lands in the manifest before the next begins, so a
killed run resumes without re-sending completed or in-flight steps.

Bases are independent and may be processed by several workers; steps
within one base are strictly ordered. Backend transport failures mark a
step (and its base) errored rather than QC-failed, and errored steps
are terminal for their run id: they are excluded from pass-rate
denominators and are not retried on resume.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from .curation import GENERATOR_NAME, BaseImageRecord
from .editor import (
    EditBackend,
    RetryPolicy,
    VariantSpec,
    edit,
    template_version,
    variant_plan,
)
from .errors import BackendError, EditorError
from .ingest import DayNight, ImageBuffer
from .manifest import (
    STATUS_ERROR,
    STATUS_FAIL,
    STATUS_INTERRUPTED,
    STATUS_PASS,
    ManifestEntry,
    ManifestState,
    ManifestWriter,
    read_manifest,
    utc_now,
)
from .qc import GatePath, QcParams, QcVerdict, evaluate_pair

logger = logging.getLogger(__name__)

VARIANTS_PER_BASE = 4


@dataclass
class PipelineConfig:
    run_id: str
    image_loader: Callable[[str], ImageBuffer]
    qc_params: QcParams = field(default_factory=QcParams)
    seed: int = 0
    workers: int = 1
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    sleep: Callable[[float], None] = time.sleep


@dataclass
class BaseResult:
    base_image_id: str
    sham_verdict: Optional[QcVerdict]
    skipped_variants: int
    variant_results: list[tuple[VariantSpec, QcVerdict]]
    api_calls_spent: int
    errored: bool = False


@dataclass
class RunSummary:
    run_id: str
    bases_in_subsample: int
    bases_processed: int
    variants_generated: int
    qc_passes: int
    sham_total: int
    sham_rejections: int
    variants_skipped: int
    calls_saved: int
    backend_calls: int
    errored_steps: int
    interrupted_steps: int
    unaccounted_bases: int

    def to_text(self) -> str:
        lines = [
            f"run {self.run_id}",
            f"  bases in subsample     {self.bases_in_subsample}",
            f"  bases processed        {self.bases_processed}",
            f"  variants generated     {self.variants_generated}",
            f"  QC passes              {self.qc_passes}",
            f"  sham rejections        {self.sham_rejections}/{self.sham_total}",
            f"  variants skipped       {self.variants_skipped}",
            f"  backend calls (run)    {self.backend_calls}",
            f"  calls saved by sham    {self.calls_saved}",
            f"  errored steps          {self.errored_steps}",
            f"  interrupted steps      {self.interrupted_steps}",
            f"  unaccounted bases      {self.unaccounted_bases}",
        ]
        return "\n".join(lines)


def _entry(
    base: BaseImageRecord,
    spec: VariantSpec,
    run_id: str,
    seed: int,
    params_fp: str,
    backend_id: str,
    status: str,
    reason: str,
    gate_path: str = GatePath.NONE.value,
    verdict: Optional[QcVerdict] = None,
) -> ManifestEntry:
    score = verdict.score if verdict else None
    return ManifestEntry(
        run_id=run_id,
        timestamp=utc_now(),
        base_image_id=base.image_id,
        order_index=spec.order_index,
        severity=spec.severity.label,
        species=base.species,
        day_night=(base.context.day_night or DayNight.DAY).value,
        backend_id=backend_id,
        status=status,
        reason=reason,
        gate_path=gate_path,
        raw_mae=round(score.raw_mae, 4) if score else None,
        norm_mae=round(score.norm_mae, 4) if score else None,
        ssim=round(score.ssim, 4) if score else None,
        mask_area_fraction=round(verdict.mask.area_fraction, 4) if verdict else None,
        params_fingerprint=params_fp,
        seed=seed,
    )


def process_base(
    base: BaseImageRecord,
    backend: EditBackend,
    config: PipelineConfig,
    writer: ManifestWriter,
    state: ManifestState,
) -> BaseResult:
    """Run one base through sham, gate, and conditional variants."""
    plan = variant_plan(base)
    params_fp = config.qc_params.fingerprint()
    day_night = base.context.day_night or DayNight.DAY
    image: Optional[ImageBuffer] = None
    variant_results: list[tuple[VariantSpec, QcVerdict]] = []
    sham_verdict: Optional[QcVerdict] = None
    calls = 0
    skipped = 0
    errored = False

    for spec in plan:
        key = (config.run_id, base.image_id, spec.order_index)
        prior = state.results.get(key)
        if prior is not None:
            status = prior.status
        elif key in state.attempts:
            # Killed mid-call last run; never re-send an in-flight step.
            writer.append_result(
                _entry(
                    base, spec, config.run_id, config.seed, params_fp,
                    backend_id="", status=STATUS_INTERRUPTED,
                    reason="interrupted mid-call in a previous run",
                )
            )
            status = STATUS_INTERRUPTED
        else:
            if image is None:
                try:
                    image = config.image_loader(base.image_id)
                except Exception as exc:
                    writer.append_result(
                        _entry(
                            base, spec, config.run_id, config.seed, params_fp,
                            backend_id="", status=STATUS_ERROR,
                            reason=f"image load failed: {exc}",
                        )
                    )
                    errored = True
                    break
            writer.append_attempt(config.run_id, base.image_id, spec.order_index)
            try:
                result = edit(image, spec, backend, config.retry, config.sleep)
                calls += 1
            except (BackendError, EditorError) as exc:
                writer.append_result(
                    _entry(
                        base, spec, config.run_id, config.seed, params_fp,
                        backend_id=backend.backend_id, status=STATUS_ERROR,
                        reason=str(exc)[:300],
                    )
                )
                status = STATUS_ERROR
            else:
                verdict = evaluate_pair(
                    image, result.image, base.detection.bbox, day_night, config.qc_params
                )
                writer.append_result(
                    _entry(
                        base, spec, config.run_id, config.seed, params_fp,
                        backend_id=result.backend_id,
                        status=STATUS_PASS if verdict.passed else STATUS_FAIL,
                        reason=verdict.reason.value,
                        gate_path=verdict.gate_path.value,
                        verdict=verdict,
                    )
                )
                status = STATUS_PASS if verdict.passed else STATUS_FAIL
                variant_results.append((spec, verdict))
                if spec.order_index == 0:
                    sham_verdict = verdict

        if spec.order_index == 0:
            if status == STATUS_FAIL:
                skipped = 3
                break
            if status in (STATUS_ERROR, STATUS_INTERRUPTED):
                errored = True
                break
        elif status in (STATUS_ERROR, STATUS_INTERRUPTED):
            errored = True

    return BaseResult(
        base_image_id=base.image_id,
        sham_verdict=sham_verdict,
        skipped_variants=skipped,
        variant_results=variant_results,
        api_calls_spent=calls,
        errored=errored,
    )


def run_pipeline(
    subsample: Sequence[BaseImageRecord],
    backend: EditBackend,
    config: PipelineConfig,
    manifest_path: str | Path,
) -> RunSummary:
    """Process every base, resuming past completed manifest entries."""
    state = read_manifest(manifest_path)
    writer = ManifestWriter(manifest_path)
    if not any(h.get("run_id") == config.run_id for h in state.headers):
        writer.append_header(
            run_id=config.run_id,
            seed=config.seed,
            generator=GENERATOR_NAME,
            params_fingerprint=config.qc_params.fingerprint(),
            template_version=template_version(),
        )

    def one(base: BaseImageRecord) -> BaseResult:
        try:
            return process_base(base, backend, config, writer, state)
        except Exception:
            logger.exception("base %s failed unexpectedly", base.image_id)
            return BaseResult(
                base_image_id=base.image_id,
                sham_verdict=None,
                skipped_variants=0,
                variant_results=[],
                api_calls_spent=0,
                errored=True,
            )

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            base_results = list(pool.map(one, subsample))
    else:
        base_results = [one(base) for base in subsample]

    return summarize_run(
        config.run_id,
        subsample,
        read_manifest(manifest_path),
        backend_calls=sum(r.api_calls_spent for r in base_results),
    )


def summarize_run(
    run_id: str,
    subsample: Sequence[BaseImageRecord],
    state: ManifestState,
    backend_calls: int,
) -> RunSummary:
    wanted = {base.image_id for base in subsample}
    entries = [
        e for e in state.entries if e.run_id == run_id and e.base_image_id in wanted
    ]
    verdicts = [e for e in entries if e.has_verdict]
    shams = [e for e in verdicts if e.order_index == 0]
    sham_rejections = sum(1 for e in shams if e.status == STATUS_FAIL)
    seen_bases = {e.base_image_id for e in entries}
    return RunSummary(
        run_id=run_id,
        bases_in_subsample=len(subsample),
        bases_processed=len(seen_bases),
        variants_generated=len(verdicts),
        qc_passes=sum(1 for e in verdicts if e.status == STATUS_PASS),
        sham_total=len(shams),
        sham_rejections=sham_rejections,
        variants_skipped=3 * sham_rejections,
        calls_saved=3 * sham_rejections,
        backend_calls=backend_calls,
        errored_steps=sum(1 for e in entries if e.status == STATUS_ERROR),
        interrupted_steps=sum(1 for e in entries if e.status == STATUS_INTERRUPTED),
        unaccounted_bases=len(wanted - seen_bases),
    )
