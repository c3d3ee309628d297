from __future__ import annotations

import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL_SYNTH, make_cube, make_record
from core.cube_io import DataCube, Manifest, Split, iter_cubes, read_cube
from core.evaluation import FoldUnit
from core.features import Label
from core.optimizer import GaConfig
from core.pipeline import (
    BandModel,
    FitnessContext,
    LengthRule,
    PatchDataset,
    SelectionSpec,
    classify_stem,
    evaluate_bands,
    fit_band_model,
    length_frame,
    mean_absolute_error,
    predict_length,
    select_bands,
    stem_predictions,
)
from core.synth import generate

H, I = Label.HEALTHY, Label.INFECTED
RGB = (5, 10, 17)
SMALL_SELECTION = SelectionSpec(
    k=2,
    ga=GaConfig(population=8, max_generations=3, runs=2, seed=3),
    cv_folds=3,
    patch_width=SMALL_SYNTH.patch_width,
)


@pytest.fixture(scope="module")
def dataset(synth_manifest: Manifest) -> PatchDataset:
    return PatchDataset.build(synth_manifest, patch_width=SMALL_SYNTH.patch_width)


def test_classify_stem() -> None:
    assert classify_stem([H] * 25) is H
    assert classify_stem([H] * 12 + [I] + [H] * 12) is I
    assert classify_stem([I] * 25) is I


def test_classify_empty_stem() -> None:
    with pytest.raises(ValueError):
        classify_stem([])


def test_length_examples() -> None:
    assert predict_length([H] * 5, 64, 0.25) == 0.0
    assert predict_length([I, H, I, H, H], 64, 0.25) == 48.0
    assert predict_length([I, H, I, H, H], 64, 0.25, LengthRule.COUNT) == 32.0


def test_far_end_false_positive_inflates_length() -> None:
    truth = [I, I] + [H] * 23
    flipped = truth[:-1] + [I]

    assert predict_length(truth, 64, 0.25) == 32.0
    assert predict_length(flipped, 64, 0.25) == 400.0
    assert predict_length(flipped, 64, 0.25, LengthRule.COUNT) == 48.0


@settings(max_examples=1000, deadline=None)
@given(flags=st.lists(st.booleans(), min_size=1, max_size=30), extra=st.integers(min_value=0, max_value=29))
def test_length_is_monotone_and_agrees_with_stem_label(flags: list[bool], extra: int) -> None:
    more = list(flags)
    more[extra % len(flags)] = True

    for rule in LengthRule:
        assert predict_length(more, 64, 0.25, rule) >= predict_length(flags, 64, 0.25, rule)
        assert (classify_stem(flags) is H) == (predict_length(flags, 64, 0.25, rule) == 0.0)


def test_selection_spec_validation() -> None:
    with pytest.raises(ValueError, match="k must be >= 1"):
        SelectionSpec(k=0)
    with pytest.raises(ValueError, match="cv_folds"):
        SelectionSpec(cv_folds=1)
    assert SelectionSpec(k=6).ga.k == 6


def test_dataset_shape_and_labels(dataset: PatchDataset, synth_manifest: Manifest) -> None:
    patches_per_stem = SMALL_SYNTH.cols // SMALL_SYNTH.patch_width

    assert dataset.n_patches == len(synth_manifest.records) * patches_per_stem
    assert dataset.n_bands == SMALL_SYNTH.n_bands
    assert dataset.stems == [record.stem_id for record in synth_manifest.records]
    for record in synth_manifest.records:
        rows = dataset.stem_ids == record.stem_id
        expected = math.ceil(record.infected_extent_mm / (SMALL_SYNTH.patch_width * SMALL_SYNTH.scale_mm_per_px))
        assert int(dataset.infected[rows].sum()) == min(expected, patches_per_stem)


def test_dataset_from_mapping_matches_lazy_reads(dataset: PatchDataset, synth_manifest: Manifest) -> None:
    cubes = {record.stem_id: cube for record, cube in iter_cubes(synth_manifest)}

    rebuilt = PatchDataset.build(synth_manifest, cubes, patch_width=SMALL_SYNTH.patch_width)

    np.testing.assert_array_equal(rebuilt.means, dataset.means)
    np.testing.assert_array_equal(rebuilt.infected, dataset.infected)


def test_dataset_rejects_mixed_axes(synth_manifest: Manifest) -> None:
    cubes = {record.stem_id: read_cube(synth_manifest.cube_file(record)) for record in synth_manifest.records}
    odd = synth_manifest.records[-1].stem_id
    cubes[odd] = DataCube(wavelengths=cubes[odd].wavelengths + 1.0, reflectance=cubes[odd].reflectance)

    with pytest.raises(ValueError, match=f"stem {odd}: wavelength axis"):
        PatchDataset.build(synth_manifest, cubes, patch_width=SMALL_SYNTH.patch_width)


def test_dataset_missing_cube(synth_manifest: Manifest) -> None:
    with pytest.raises(ValueError, match="no cube supplied"):
        PatchDataset.build(synth_manifest, {}, patch_width=SMALL_SYNTH.patch_width)


def test_splits(dataset: PatchDataset) -> None:
    train, test = dataset.subset(Split.TRAIN), dataset.subset(Split.TEST)

    assert train.n_patches + test.n_patches == dataset.n_patches
    assert {dataset.records[s].split for s in train.stems} == {Split.TRAIN}
    assert len(test.stems) == SMALL_SYNTH.n_stems_test


def test_planted_bands_beat_noise_bands(dataset: PatchDataset) -> None:
    context = FitnessContext(dataset.subset(Split.TRAIN), RGB, SMALL_SELECTION)

    planted = context.fitness((25, 33))
    noise = context.fitness((0, 1))

    assert planted >= 0.85
    assert planted > noise
    assert context.fitness((33, 25)) == planted


def test_one_planted_band_is_not_enough(tmp_path: Path) -> None:
    spec = replace(SMALL_SYNTH, planted_bands=(25, 30, 35))
    manifest = generate(spec, tmp_path)
    train = PatchDataset.build(manifest, patch_width=spec.patch_width).subset(Split.TRAIN)
    context = FitnessContext(train, RGB, SMALL_SELECTION)

    assert context.fitness((25, 30)) >= 0.85
    assert context.fitness((30, 35)) >= 0.85
    assert context.fitness((25, 1)) < 0.85


def test_fitness_is_repeatable(dataset: PatchDataset) -> None:
    train = dataset.subset(Split.TRAIN)
    first = FitnessContext(train, RGB, SMALL_SELECTION).fitness((25, 2))
    second = FitnessContext(train, RGB, SMALL_SELECTION).fitness((25, 2))
    assert first == second


def test_stem_grouped_folds(dataset: PatchDataset) -> None:
    spec = SelectionSpec(k=2, cv_folds=3, fold_unit=FoldUnit.STEM, patch_width=SMALL_SYNTH.patch_width)
    context = FitnessContext(dataset.subset(Split.TRAIN), RGB, spec)

    for stem in context.train.stems:
        assert len(set(context.folds[context.train.stem_ids == stem].tolist())) == 1


def test_evaluate_bands_totals(synth_manifest: Manifest, dataset: PatchDataset) -> None:
    evaluation = evaluate_bands(synth_manifest, bands=RGB + (25, 33), spec=SMALL_SELECTION, dataset=dataset)
    test = dataset.subset(Split.TEST)

    assert evaluation.test_report.matrix.total == test.n_patches
    assert evaluation.stem_report.matrix.total == SMALL_SYNTH.n_stems_test
    assert evaluation.wavelengths == tuple(float(dataset.wavelengths[b]) for b in RGB + (25, 33))
    assert evaluation.stem_report.f1 == 1.0
    assert evaluation.early_detection_report is not None
    assert sum(r.matrix.total for r in evaluation.dai_reports.values()) == SMALL_SYNTH.n_stems_test

    payload = json.loads(json.dumps(evaluation.to_dict()))
    assert payload["bands"] == [5, 10, 17, 25, 33]
    assert "early_detection" in payload


def test_evaluate_bands_rejects_bad_band(synth_manifest: Manifest, dataset: PatchDataset) -> None:
    with pytest.raises(ValueError, match="outside"):
        evaluate_bands(synth_manifest, bands=(5, 40), spec=SMALL_SELECTION, dataset=dataset)


def test_evaluate_needs_both_splits(synth_manifest: Manifest) -> None:
    train_only = Manifest(
        records=tuple(synth_manifest.split_records(Split.TRAIN)),
        scale_mm_per_px=synth_manifest.scale_mm_per_px,
        base_dir=synth_manifest.base_dir,
    )
    with pytest.raises(ValueError, match="no test records"):
        evaluate_bands(train_only, bands=RGB, spec=SMALL_SELECTION)


def test_perfect_predictions_give_quantized_lengths(dataset: PatchDataset) -> None:
    test = dataset.subset(Split.TEST)
    patch_mm = SMALL_SYNTH.patch_width * SMALL_SYNTH.scale_mm_per_px

    frame = length_frame(stem_predictions(test, test.infected), SMALL_SYNTH.patch_width, SMALL_SYNTH.scale_mm_per_px)

    assert list(frame.columns) == ["stem_id", "actual_interior_mm", "predicted_mm"]
    error = frame["predicted_mm"] - frame["actual_interior_mm"]
    assert (error >= 0).all() and (error < patch_mm).all()
    assert mean_absolute_error(frame) <= patch_mm


def test_all_healthy_predictions_give_zero_lengths(dataset: PatchDataset) -> None:
    test = dataset.subset(Split.TEST)
    frame = length_frame(
        stem_predictions(test, np.zeros(test.n_patches, dtype=bool)), SMALL_SYNTH.patch_width, SMALL_SYNTH.scale_mm_per_px
    )
    assert (frame["predicted_mm"] == 0.0).all()


def test_band_model_document(dataset: PatchDataset) -> None:
    trained = fit_band_model(dataset.subset(Split.TRAIN), RGB + (25,), SMALL_SELECTION)

    restored = BandModel.from_dict(json.loads(json.dumps(trained.to_dict())))

    test = dataset.subset(Split.TEST)
    np.testing.assert_array_equal(restored.predict(test), trained.predict(test))
    assert restored.bands == RGB + (25,)


def test_band_model_rejects_other_patch_width(dataset: PatchDataset) -> None:
    trained = fit_band_model(dataset.subset(Split.TRAIN), RGB, SMALL_SELECTION)
    other = BandModel(trained.bands, trained.wavelengths, trained.model, patch_width=16)
    with pytest.raises(ValueError, match="16-px patches"):
        other.predict(dataset)


def test_select_bands_small_run(synth_manifest: Manifest) -> None:
    result = select_bands(synth_manifest, spec=SMALL_SELECTION, max_parallel_tasks=2)

    assert result.band_indices[:3] == RGB
    assert len(result.band_indices) == 3 + SMALL_SELECTION.k
    assert result.band_indices[3:] == tuple(sorted(result.variable_bands))
    assert len(result.history) >= 2
    payload = json.loads(json.dumps(result.to_dict()))
    assert payload["seed"] == 3
    assert payload["config"]["ga"]["k"] == 2
    assert len(payload["wavelengths"]) == 5
    assert list(result.history_frame().columns) == ["run", "generation", "best_f1", "mean_f1", "best_bands"]

    again = evaluate_bands(synth_manifest, bands=result.band_indices, spec=SMALL_SELECTION)
    assert again.test_report == result.test_report
    assert again.stem_report == result.stem_report


def test_select_bands_without_rgb(synth_manifest: Manifest) -> None:
    spec = SelectionSpec(
        k=3,
        include_rgb=False,
        ga=GaConfig(population=6, max_generations=2, runs=1),
        cv_folds=3,
        patch_width=SMALL_SYNTH.patch_width,
    )
    result = select_bands(synth_manifest, spec=spec)
    assert len(result.band_indices) == 3
    assert result.band_indices == result.variable_bands


def test_dataset_spectrum_shows_planted_dip(dataset: PatchDataset) -> None:
    frame = dataset.spectrum().to_frame()
    assert len(frame) == SMALL_SYNTH.n_bands
    assert (frame["infected_mean"].iloc[24:27] < frame["healthy_mean"].iloc[24:27]).all()


def test_single_class_training_split() -> None:
    record = make_record("only", interior_mm=0.0)
    cube = make_cube(cols=16)
    manifest = Manifest(records=(record,), scale_mm_per_px=0.25)
    data = PatchDataset.build(manifest, {"only": cube}, patch_width=4)
    with pytest.raises(ValueError, match="single class"):
        FitnessContext(data, (), SelectionSpec(cv_folds=2, patch_width=4))
