"""Desk-scale end-to-end runs on the default synthetic layout; enabled with --runslow."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from core.cube_io import Manifest
from core.optimizer import GaConfig
from core.pipeline import (
    PatchDataset,
    SelectionResult,
    SelectionSpec,
    evaluate_bands,
    length_frame,
    rgb_bands,
    select_bands,
    stem_predictions,
)
from core.synth import SynthSpec, generate

pytestmark = pytest.mark.slow

DESK_SYNTH = SynthSpec(rows=100, cols=320, seed=2)
DESK_SELECTION = SelectionSpec(k=3, ga=GaConfig(population=30, max_generations=20, runs=2, seed=4))


@pytest.fixture(scope="module")
def desk_manifest(tmp_path_factory: pytest.TempPathFactory) -> Manifest:
    return generate(DESK_SYNTH, tmp_path_factory.mktemp("desk"))


@pytest.fixture(scope="module")
def desk_dataset(desk_manifest: Manifest) -> PatchDataset:
    return PatchDataset.build(desk_manifest, patch_width=DESK_SELECTION.patch_width)


@pytest.fixture(scope="module")
def selection(desk_manifest: Manifest) -> SelectionResult:
    return select_bands(desk_manifest, spec=DESK_SELECTION)


def _planted_hits(bands: tuple[int, ...]) -> int:
    return sum(any(abs(band - planted) <= 2 for band in bands) for planted in DESK_SYNTH.planted_bands)


def test_planted_bands_recovered_across_seeds(desk_manifest: Manifest) -> None:
    hits = []
    for seed in range(5):
        ga = GaConfig(population=100, max_generations=100, runs=5, stall_window=20, seed=seed)
        result = select_bands(desk_manifest, spec=replace(DESK_SELECTION, ga=ga))
        hits.append(_planted_hits(result.variable_bands))
        assert result.stem_report.f1 >= 0.95

    assert sum(count >= 2 for count in hits) >= 4, hits


def test_default_selection_hits_two_planted_bands(selection: SelectionResult) -> None:
    assert _planted_hits(selection.variable_bands) >= 2
    assert selection.stem_report.f1 >= 0.95


def test_selected_bands_beat_rgb(desk_manifest: Manifest, desk_dataset: PatchDataset, selection: SelectionResult) -> None:
    rgb = evaluate_bands(
        desk_manifest, bands=rgb_bands(desk_dataset.wavelengths, DESK_SELECTION), spec=DESK_SELECTION, dataset=desk_dataset
    )
    assert selection.test_report.f1 - rgb.test_report.f1 >= 0.15


def test_early_detection_slice(selection: SelectionResult) -> None:
    early = selection.evaluation.early_detection_report
    assert early is not None
    assert early.f1 >= 0.85


def test_early_lesions_are_the_smallest(desk_manifest: Manifest) -> None:
    interiors: dict[int, list[float]] = {}
    for record in desk_manifest.records:
        if record.interior_mm is not None:
            interiors.setdefault(record.dai, []).append(record.interior_mm)
    earliest = min(interiors)
    later = [mm for dai, values in interiors.items() if dai != earliest for mm in values]

    assert max(interiors[earliest]) <= min(later) + DESK_SYNTH.scale_mm_per_px


def test_predicted_lengths_track_actual(desk_dataset: PatchDataset, selection: SelectionResult) -> None:
    trained = selection.evaluation.trained
    frame = length_frame(
        stem_predictions(desk_dataset, trained.predict(desk_dataset)),
        DESK_SELECTION.patch_width,
        DESK_SYNTH.scale_mm_per_px,
    )

    assert len(frame) >= 30
    correlation = np.corrcoef(frame["actual_interior_mm"], frame["predicted_mm"])[0, 1]
    assert correlation >= 0.9


def test_selection_repeats_exactly(desk_manifest: Manifest) -> None:
    spec = replace(DESK_SELECTION, ga=replace(DESK_SELECTION.ga, runs=1))
    first = select_bands(desk_manifest, spec=spec)
    second = select_bands(desk_manifest, spec=spec, max_parallel_tasks=1)
    assert first.to_dict() == second.to_dict()
