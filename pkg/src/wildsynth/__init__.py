"""wildsynth: curate, edit, and quality-control synthetic camera-trap imagery."""

__version__ = "0.1.0"

from .curation import (
    BaseImageRecord,
    StratumKey,
    build_base_set,
    make_candidate,
    placement_weight,
    read_base_set,
    stratified_subsample,
    write_base_set,
)
from .editor import (
    MockBackend,
    RemoteBackend,
    Severity,
    VariantSpec,
    build_prompt,
    edit,
    mock_perturb,
    variant_plan,
)
from .ingest import (
    BBox,
    CaptureContext,
    Category,
    DayNight,
    DetectionRecord,
    ImageBuffer,
    Season,
    classify_day_night,
    derive_season,
    load_image,
    parse_detections,
    select_primary_detection,
)
from .manifest import ManifestEntry, ManifestWriter, load_entries, read_manifest
from .orchestrator import PipelineConfig, RunSummary, process_base, run_pipeline
from .qc import (
    ChangeMask,
    GatePath,
    GateReason,
    QcParams,
    QcVerdict,
    SceneScore,
    connected_components,
    diff_mask,
    evaluate_pair,
    gate,
    scene_scores,
)
from .report import species_breakdown, summarize, variant_breakdown
from .transfer import (
    EvalReport,
    FeatureRecord,
    HeadConfig,
    auroc,
    balanced_accuracy,
    evaluate,
    kfold_cv,
    load_features,
    train_linear,
    train_mlp,
)
