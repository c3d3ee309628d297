"""Application-wide names and defaults shared by the command line and engines."""

from __future__ import annotations

import os
from dataclasses import dataclass


@dataclass(frozen=True)
class AppConfig:
    """Global application config: artifact file names and runtime defaults."""

    app_name: str = "Charcoal Rot Band Selector"
    version: str = "1.0.0"

    manifest_file: str = "manifest.csv"
    truth_file: str = "truth.json"
    cube_dir: str = "cubes"
    cube_suffix: str = ".hsc"

    selection_file: str = "selection.json"
    history_file: str = "history.csv"
    model_file: str = "model.json"
    report_file: str = "report.json"
    lengths_file: str = "lengths.csv"
    spectrum_file: str = "spectrum.csv"

    default_scale_mm_per_px: float = 0.25
    early_detection_dai: int = 3


APP_CONFIG = AppConfig()


def resolve_threads(threads: int) -> int:
    """Map the --threads flag to a worker count (0 means one per CPU)."""
    if threads < 0:
        raise ValueError(f"threads must be >= 0, got {threads}")
    if threads == 0:
        return os.cpu_count() or 1
    return threads
