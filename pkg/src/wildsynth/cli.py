"""Command-line entry points: run, report, eval."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from .curation import read_base_set, stratified_subsample
from .editor import MockBackend, RemoteBackend, RetryPolicy
from .errors import WildsynthError
from .ingest import load_image
from .manifest import load_entries
from .orchestrator import PipelineConfig, run_pipeline
from .qc import QcParams
from .report import (
    species_breakdown,
    species_breakdown_text,
    summarize,
    variant_breakdown,
    variant_breakdown_text,
)
from .transfer import (
    HeadConfig,
    evaluate,
    file_sha256,
    load_features,
    split_records,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ABORTED = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wildsynth",
        description="Curate, edit, and quality-control synthetic camera-trap imagery.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="process a stratified subsample of a base set")
    run.add_argument("--base-set", required=True, help="base-set record file (one JSON per line)")
    run.add_argument("--n", type=int, required=True, help="subsample size")
    run.add_argument("--seed", type=int, required=True, help="sampling / run seed")
    run.add_argument("--backend", choices=["mock", "remote"], required=True)
    run.add_argument("--config", help="JSON config file")
    run.add_argument("--manifest", required=True, help="append-only manifest path")
    run.add_argument("--images-dir", help="directory resolving image ids to files")
    run.add_argument("--run-id", help="defaults to run-<seed>-<n>, stable across restarts")

    rep = sub.add_parser("report", help="aggregate a manifest into summary tables")
    rep.add_argument("--manifest", required=True)
    rep.add_argument("--day-only", action="store_true")
    rep.add_argument("--by", choices=["species", "variant"])
    rep.add_argument("--format", choices=["text", "json"], default="text")

    ev = sub.add_parser("eval", help="screening-head evaluation over a feature file")
    ev.add_argument("--features", required=True)
    ev.add_argument("--head", choices=["linear", "mlp"], required=True)
    ev.add_argument("--cv", type=int, help="run stratified k-fold CV on the train split")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", help="write the JSON report here")
    return parser


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _make_backend(name: str, config: dict):
    if name == "mock":
        mock_cfg = config.get("mock", {})
        script = {
            tag: MockBackend.MODES[kind]()
            for tag, kind in mock_cfg.get("script", {}).items()
        }
        return MockBackend(
            mode=mock_cfg.get("mode", "identity"),
            script=script or None,
            call_log=mock_cfg.get("call_log"),
            latency_s=float(mock_cfg.get("latency_s", 0.0)),
        )
    remote_cfg = config.get("remote", {})
    url = remote_cfg.get("url")
    if not url:
        raise WildsynthError("remote backend requires config['remote']['url']")
    return RemoteBackend(
        url=url, token_env=remote_cfg.get("token_env", "WILDSYNTH_BACKEND_TOKEN")
    )


def cmd_run(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    images_dir = args.images_dir or config.get("images_dir")
    if not images_dir:
        raise WildsynthError("provide --images-dir or config['images_dir']")
    image_root = Path(images_dir)

    base_set = read_base_set(args.base_set)
    subsample = stratified_subsample(base_set, args.n, args.seed)
    retry_cfg = config.get("retry", {})
    pipeline = PipelineConfig(
        run_id=args.run_id or config.get("run_id") or f"run-{args.seed}-{args.n}",
        image_loader=lambda image_id: load_image(image_root / image_id),
        qc_params=QcParams(**config.get("qc", {})),
        seed=args.seed,
        workers=int(config.get("workers", 1)),
        retry=RetryPolicy(
            attempts=int(retry_cfg.get("attempts", 3)),
            backoffs_s=tuple(retry_cfg.get("backoffs_s", (1.0, 4.0, 16.0))),
        ),
    )
    backend = _make_backend(args.backend, config)
    summary = run_pipeline(subsample, backend, pipeline, args.manifest)
    print(summary.to_text())
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    entries = load_entries(args.manifest)
    if args.by == "variant":
        rows = variant_breakdown(entries, day_only=args.day_only)
        if args.format == "json":
            print(json.dumps([r.to_dict() for r in rows], indent=2))
        else:
            print(variant_breakdown_text(rows))
    elif args.by == "species":
        rows = species_breakdown(entries)
        if args.format == "json":
            print(json.dumps([r.to_dict() for r in rows], indent=2))
        else:
            print(species_breakdown_text(rows))
    else:
        table = summarize(entries)
        if args.format == "json":
            print(json.dumps(table.to_dict(), indent=2))
        else:
            print(table.to_text())
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    records = load_features(args.features)
    train, test = split_records(records)
    if not test:
        raise WildsynthError("feature file has no test_real rows to evaluate on")
    cfg = HeadConfig(kind=args.head, seed=args.seed)
    report = evaluate(
        train,
        test,
        cfg,
        cv_folds=args.cv,
        cv_seed=args.seed,
        feature_file_sha256=file_sha256(args.features),
    )
    payload = report.to_dict()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
    print(
        f"{report.head_kind}: AUROC {report.auroc:.3f}, "
        f"balanced accuracy {report.balanced_accuracy:.3f} "
        f"(train {report.n_train}, test {report.n_test})"
        + (
            f", CV {report.cv_mean:.3f} +/- {report.cv_std:.3f}"
            if report.cv_mean is not None
            else ""
        )
    )
    return EXIT_OK


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    handlers = {"run": cmd_run, "report": cmd_report, "eval": cmd_eval}
    try:
        return handlers[args.command](args)
    except WildsynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
