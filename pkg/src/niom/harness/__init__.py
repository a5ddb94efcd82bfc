"""Manifests, the evaluation pipeline, reports, rendering and synthetic scenes."""

from .manifest import Category, ManifestError, PairRecord, load_manifest, write_manifest
from .pipeline import PairResult, RunConfig, RunReport, process_pair, run_pipeline, worker_count
from .report import build_table, parse_csv, render_report
from .viz import render_matches

__all__ = [
    "Category", "ManifestError", "PairRecord", "load_manifest", "write_manifest",
    "PairResult", "RunConfig", "RunReport", "process_pair", "run_pipeline", "worker_count",
    "build_table", "parse_csv", "render_report", "render_matches",
]
