"""Band-selection experiment: patch dataset, GA fitness, train/test evaluation, stem rules."""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any

import numpy as np
import pandas as pd

from core.cube_io import DataCube, Manifest, Split, StemRecord, iter_cubes
from core.evaluation import (
    EvalReport,
    FoldUnit,
    accumulate,
    assign_folds,
    cross_validate_arrays,
    matrix_from_masks,
    metrics,
)
from core.features import (
    RGB_TARGETS_NM,
    Label,
    SpectrumCurves,
    build_band_map,
    label_patches,
    make_patches,
    patch_means,
    spectrum_from_means,
)
from core.optimizer import GaConfig, GenerationStats, GeneticBandOptimizer
from core.svm import SvmConfig, SvmModel, predict_batch, train_arrays
from utils.config import APP_CONFIG
from utils.logger import log

CubeSource = Mapping[str, DataCube] | Iterable[tuple[StemRecord, DataCube]] | None


class LengthRule(str, Enum):
    FARTHEST = "farthest"
    COUNT = "count"


@dataclass(frozen=True)
class SelectionSpec:
    """Experiment settings. ``k`` is authoritative and overrides ``ga.k``."""

    k: int = 3
    include_rgb: bool = True
    rgb_targets: tuple[float, ...] = RGB_TARGETS_NM
    ga: GaConfig = field(default_factory=GaConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    cv_folds: int = 10
    fold_unit: FoldUnit = FoldUnit.PATCH
    patch_width: int = 64
    mask_threshold: float | None = None

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.cv_folds < 2:
            raise ValueError(f"cv_folds must be >= 2, got {self.cv_folds}")
        if self.patch_width < 1:
            raise ValueError(f"patch_width must be >= 1, got {self.patch_width}")
        object.__setattr__(self, "fold_unit", FoldUnit(self.fold_unit))
        if self.ga.k != self.k:
            object.__setattr__(self, "ga", replace(self.ga, k=self.k))

    @property
    def seed(self) -> int:
        return self.ga.seed

    def to_dict(self) -> dict[str, Any]:
        return {
            "k": self.k,
            "include_rgb": self.include_rgb,
            "rgb_targets": list(self.rgb_targets),
            "ga": asdict(self.ga),
            "svm": asdict(self.svm),
            "cv_folds": self.cv_folds,
            "fold_unit": self.fold_unit.value,
            "patch_width": self.patch_width,
            "mask_threshold": self.mask_threshold,
        }


@dataclass(frozen=True, eq=False)
class PatchDataset:
    """Full-spectrum patch means with labels, one row per patch, in manifest order."""

    wavelengths: np.ndarray
    means: np.ndarray
    infected: np.ndarray
    stem_ids: np.ndarray
    patch_index: np.ndarray
    records: Mapping[str, StemRecord]
    patch_width: int
    scale_mm_per_px: float

    @classmethod
    def build(
        cls,
        manifest: Manifest,
        cubes: CubeSource = None,
        patch_width: int = 64,
        mask_threshold: float | None = None,
    ) -> PatchDataset:
        """Tile, label and average every stem; cubes default to lazy reads from the manifest."""
        if cubes is None:
            pairs: Iterable[tuple[StemRecord, DataCube]] = iter_cubes(manifest)
        elif isinstance(cubes, Mapping):
            pairs = _pairs_from_mapping(manifest, cubes)
        else:
            pairs = cubes

        wavelengths: np.ndarray | None = None
        blocks: list[np.ndarray] = []
        infected: list[bool] = []
        stem_ids: list[str] = []
        indices: list[int] = []
        records: dict[str, StemRecord] = {}
        for record, cube in pairs:
            if wavelengths is None:
                wavelengths = cube.wavelengths
            elif not np.array_equal(wavelengths, cube.wavelengths):
                raise ValueError(f"stem {record.stem_id}: wavelength axis differs from the first cube")
            patches = label_patches(make_patches(cube, record, patch_width), record, manifest.scale_mm_per_px)
            blocks.append(patch_means(cube, patches, mask_threshold=mask_threshold))
            infected.extend(patch.label is Label.INFECTED for patch in patches)
            stem_ids.extend(patch.stem_id for patch in patches)
            indices.extend(patch.patch_index for patch in patches)
            records[record.stem_id] = record

        if wavelengths is None:
            raise ValueError("no cubes to build a patch dataset from")
        dataset = cls(
            wavelengths=np.asarray(wavelengths, dtype=np.float64),
            means=np.vstack(blocks),
            infected=np.array(infected, dtype=bool),
            stem_ids=np.array(stem_ids),
            patch_index=np.array(indices, dtype=np.int64),
            records=records,
            patch_width=patch_width,
            scale_mm_per_px=manifest.scale_mm_per_px,
        )
        log(
            f"Patch dataset built: {len(records)} stems, {dataset.n_patches} patches "
            f"({int(dataset.infected.sum())} infected)"
        )
        return dataset

    @property
    def n_patches(self) -> int:
        return int(self.means.shape[0])

    @property
    def n_bands(self) -> int:
        return int(self.means.shape[1])

    @property
    def stems(self) -> list[str]:
        """Stem ids in first-appearance order."""
        return list(dict.fromkeys(self.stem_ids.tolist()))

    def select(self, mask: np.ndarray) -> PatchDataset:
        kept = set(self.stem_ids[mask].tolist())
        return replace(
            self,
            means=self.means[mask],
            infected=self.infected[mask],
            stem_ids=self.stem_ids[mask],
            patch_index=self.patch_index[mask],
            records={stem: record for stem, record in self.records.items() if stem in kept},
        )

    def subset(self, split: Split | str) -> PatchDataset:
        split = Split(split)
        mask = np.array([self.records[stem].split is split for stem in self.stem_ids.tolist()], dtype=bool)
        return self.select(mask)

    def features(self, bands: Sequence[int]) -> np.ndarray:
        return self.means[:, list(bands)]

    def labels(self) -> list[Label]:
        return [Label.INFECTED if flag else Label.HEALTHY for flag in self.infected]

    def spectrum(self) -> SpectrumCurves:
        return spectrum_from_means(self.means, self.labels(), self.wavelengths)


def _pairs_from_mapping(manifest: Manifest, cubes: Mapping[str, DataCube]) -> Iterable[tuple[StemRecord, DataCube]]:
    for record in manifest.records:
        if record.stem_id not in cubes:
            raise ValueError(f"no cube supplied for stem {record.stem_id}")
        yield record, cubes[record.stem_id]


def _check_bands(bands: Sequence[int], n_bands: int) -> tuple[int, ...]:
    checked = tuple(int(band) for band in bands)
    if not checked:
        raise ValueError("band list is empty")
    if len(set(checked)) != len(checked):
        raise ValueError(f"duplicate band indices in {list(checked)}")
    for band in checked:
        if not 0 <= band < n_bands:
            raise ValueError(f"band index {band} outside [0, {n_bands - 1}]")
    return checked


def _require_both_classes(dataset: PatchDataset, what: str) -> None:
    if dataset.n_patches == 0:
        raise ValueError(f"{what} has no patches")
    if dataset.infected.all() or not dataset.infected.any():
        raise ValueError(f"{what} holds a single class")


class FitnessContext:
    """CV F1 of a band set on the training patches; folds are fixed once per context."""

    def __init__(self, train: PatchDataset, fixed_bands: Sequence[int], spec: SelectionSpec) -> None:
        _require_both_classes(train, "training split")
        self.train = train
        self.fixed_bands = tuple(int(band) for band in fixed_bands)
        self.spec = spec
        groups = train.stem_ids if spec.fold_unit is FoldUnit.STEM else None
        self.folds = assign_folds(train.infected, groups, spec.cv_folds, spec.seed)

    def bands_for(self, band_set: Sequence[int]) -> tuple[int, ...]:
        return self.fixed_bands + tuple(sorted(int(band) for band in band_set))

    def report(self, bands: Sequence[int]) -> EvalReport:
        matrix = cross_validate_arrays(self.train.features(bands), self.train.infected, self.folds, self.spec.svm)
        return metrics(matrix)

    def fitness(self, band_set: Sequence[int]) -> float:
        return self.report(self.bands_for(band_set)).f1


@dataclass(frozen=True)
class StemPrediction:
    stem_id: str
    dai: int
    actual_mm: float
    actual: Label
    patch_predictions: tuple[bool, ...]

    @property
    def predicted(self) -> Label:
        return classify_stem(self.patch_predictions)


@dataclass(frozen=True, eq=False)
class BandModel:
    """A trained classifier together with the band indices and patching it expects."""

    bands: tuple[int, ...]
    wavelengths: tuple[float, ...]
    model: SvmModel
    patch_width: int
    mask_threshold: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "bands": list(self.bands),
            "wavelengths": list(self.wavelengths),
            "patch_width": self.patch_width,
            "mask_threshold": self.mask_threshold,
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> BandModel:
        try:
            bands = tuple(int(band) for band in payload["bands"])
            model = SvmModel.from_dict(payload["model"])
            patch_width = int(payload["patch_width"])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed model document: {exc}") from exc
        if model.n_features != len(bands):
            raise ValueError(f"model expects {model.n_features} features but lists {len(bands)} bands")
        return cls(
            bands=bands,
            wavelengths=tuple(float(nm) for nm in payload.get("wavelengths", [])),
            model=model,
            patch_width=patch_width,
            mask_threshold=payload.get("mask_threshold"),
        )

    def predict(self, dataset: PatchDataset) -> np.ndarray:
        _check_bands(self.bands, dataset.n_bands)
        if dataset.patch_width != self.patch_width:
            raise ValueError(f"model trained on {self.patch_width}-px patches, dataset uses {dataset.patch_width}")
        return predict_batch(self.model, dataset.features(self.bands))


@dataclass
class BandEvaluation:
    """Evaluate-only outcome at a fixed band list."""

    bands: tuple[int, ...]
    wavelengths: tuple[float, ...]
    train_cv_report: EvalReport
    test_report: EvalReport
    stem_report: EvalReport
    dai_reports: dict[int, EvalReport]
    stems: list[StemPrediction]
    trained: BandModel

    @property
    def early_detection_report(self) -> EvalReport | None:
        return self.dai_reports.get(APP_CONFIG.early_detection_dai)

    def to_dict(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "bands": list(self.bands),
            "wavelengths": list(self.wavelengths),
            "train_cv": self.train_cv_report.to_dict(self.bands, self.wavelengths),
            "patch": self.test_report.to_dict(self.bands, self.wavelengths),
            "stem": self.stem_report.to_dict(self.bands, self.wavelengths),
            "dai": {str(dai): report.to_dict() for dai, report in sorted(self.dai_reports.items())},
        }
        early = self.early_detection_report
        if early is not None:
            payload["early_detection"] = early.to_dict(self.bands, self.wavelengths)
        return payload


@dataclass
class SelectionResult:
    evaluation: BandEvaluation
    variable_bands: tuple[int, ...]
    best_run: int
    history: list[GenerationStats]
    spec: SelectionSpec

    @property
    def band_indices(self) -> tuple[int, ...]:
        return self.evaluation.bands

    @property
    def band_wavelengths(self) -> tuple[float, ...]:
        return self.evaluation.wavelengths

    @property
    def train_cv_report(self) -> EvalReport:
        return self.evaluation.train_cv_report

    @property
    def test_report(self) -> EvalReport:
        return self.evaluation.test_report

    @property
    def stem_report(self) -> EvalReport:
        return self.evaluation.stem_report

    def to_dict(self) -> dict[str, Any]:
        bands, wavelengths = self.band_indices, self.band_wavelengths
        return {
            "bands": list(bands),
            "wavelengths": list(wavelengths),
            "variable_bands": list(self.variable_bands),
            "train_cv_report": self.train_cv_report.to_dict(bands, wavelengths),
            "test_report": self.test_report.to_dict(bands, wavelengths),
            "stem_report": self.stem_report.to_dict(bands, wavelengths),
            "dai_reports": {str(dai): report.to_dict() for dai, report in sorted(self.evaluation.dai_reports.items())},
            "best_run": self.best_run,
            "seed": self.spec.seed,
            "config": self.spec.to_dict(),
        }

    def history_frame(self) -> pd.DataFrame:
        return history_frame(self.history)


def history_frame(history: Sequence[GenerationStats]) -> pd.DataFrame:
    columns = ["run", "generation", "best_f1", "mean_f1", "best_bands"]
    return pd.DataFrame([stats.to_row() for stats in history], columns=columns)


def _is_infected(prediction: Label | str | bool | np.bool_) -> bool:
    if isinstance(prediction, (bool, np.bool_)):
        return bool(prediction)
    return Label(prediction) is Label.INFECTED


def classify_stem(predictions: Sequence[Label | str | bool]) -> Label:
    """Infected if at least one patch is predicted infected."""
    if len(predictions) == 0:
        raise ValueError("stem classification needs at least one patch prediction")
    return Label.INFECTED if any(_is_infected(p) for p in predictions) else Label.HEALTHY


def predict_length(
    predictions: Sequence[Label | str | bool],
    patch_width: int,
    scale_mm_per_px: float,
    rule: LengthRule | str = LengthRule.FARTHEST,
) -> float:
    """Disease length in mm from predictions ordered from the inoculation end.

    ``farthest`` runs to the far edge of the last infected patch; ``count``
    multiplies the number of infected patches by the patch length.
    """
    flags = [_is_infected(p) for p in predictions]
    patch_mm = patch_width * scale_mm_per_px
    if not any(flags):
        return 0.0
    if LengthRule(rule) is LengthRule.COUNT:
        return sum(flags) * patch_mm
    farthest = max(index for index, flag in enumerate(flags) if flag)
    return (farthest + 1) * patch_mm


def stem_predictions(dataset: PatchDataset, predicted: np.ndarray) -> list[StemPrediction]:
    """Group patch predictions by stem, ordered by patch_index."""
    out: list[StemPrediction] = []
    for stem in dataset.stems:
        rows = np.flatnonzero(dataset.stem_ids == stem)
        rows = rows[np.argsort(dataset.patch_index[rows], kind="stable")]
        record = dataset.records[stem]
        out.append(
            StemPrediction(
                stem_id=stem,
                dai=record.dai,
                actual_mm=record.infected_extent_mm,
                actual=Label.INFECTED if dataset.infected[rows].any() else Label.HEALTHY,
                patch_predictions=tuple(bool(flag) for flag in predicted[rows]),
            )
        )
    return out


def stem_report(stems: Sequence[StemPrediction]) -> EvalReport:
    return metrics(accumulate((stem.actual, stem.predicted) for stem in stems))


def dai_reports(stems: Sequence[StemPrediction]) -> dict[int, EvalReport]:
    """Stem-level report for every dai present."""
    return {
        dai: stem_report([stem for stem in stems if stem.dai == dai])
        for dai in sorted({stem.dai for stem in stems})
    }


def length_frame(
    stems: Sequence[StemPrediction],
    patch_width: int,
    scale_mm_per_px: float,
    rule: LengthRule | str = LengthRule.FARTHEST,
) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "stem_id": [stem.stem_id for stem in stems],
            "actual_interior_mm": [stem.actual_mm for stem in stems],
            "predicted_mm": [
                predict_length(stem.patch_predictions, patch_width, scale_mm_per_px, rule) for stem in stems
            ],
        },
        columns=["stem_id", "actual_interior_mm", "predicted_mm"],
    )


def mean_absolute_error(frame: pd.DataFrame) -> float:
    if frame.empty:
        raise ValueError("no stems to score")
    return float((frame["predicted_mm"] - frame["actual_interior_mm"]).abs().mean())


def fit_band_model(train: PatchDataset, bands: Sequence[int], spec: SelectionSpec) -> BandModel:
    """Train one SVM on every training patch at the given bands."""
    bands = _check_bands(bands, train.n_bands)
    _require_both_classes(train, "training split")
    model = train_arrays(train.features(bands), train.infected, spec.svm)
    log(f"Model trained on {train.n_patches} patches at bands {list(bands)}: {model.support_vectors.shape[0]} support vectors")
    return BandModel(
        bands=bands,
        wavelengths=tuple(float(train.wavelengths[band]) for band in bands),
        model=model,
        patch_width=train.patch_width,
        mask_threshold=spec.mask_threshold,
    )


def evaluate_bands(
    manifest: Manifest,
    cubes: CubeSource = None,
    bands: Sequence[int] = (),
    spec: SelectionSpec = SelectionSpec(),
    dataset: PatchDataset | None = None,
    context: FitnessContext | None = None,
) -> BandEvaluation:
    """Evaluate-only mode: CV on train, one model on all train patches, patch and stem reports on test."""
    manifest.require_splits()
    if dataset is None:
        dataset = PatchDataset.build(manifest, cubes, spec.patch_width, spec.mask_threshold)
    bands = _check_bands(bands, dataset.n_bands)
    train = dataset.subset(Split.TRAIN)
    test = dataset.subset(Split.TEST)
    if test.n_patches == 0:
        raise ValueError("test split has no patches")
    if context is None:
        context = FitnessContext(train, (), spec)

    trained = fit_band_model(train, bands, spec)
    predicted = trained.predict(test)
    stems = stem_predictions(test, predicted)
    evaluation = BandEvaluation(
        bands=bands,
        wavelengths=trained.wavelengths,
        train_cv_report=context.report(bands),
        test_report=metrics(matrix_from_masks(test.infected, predicted)),
        stem_report=stem_report(stems),
        dai_reports=dai_reports(stems),
        stems=stems,
        trained=trained,
    )
    log(f"Test F1 at bands {list(bands)}: patch={evaluation.test_report.f1:.4f} stem={evaluation.stem_report.f1:.4f}")
    return evaluation


def rgb_bands(wavelengths: np.ndarray, spec: SelectionSpec) -> tuple[int, ...]:
    return build_band_map(wavelengths, spec.rgb_targets).rgb_bands


def select_bands(
    manifest: Manifest,
    cubes: CubeSource = None,
    spec: SelectionSpec = SelectionSpec(),
    max_parallel_tasks: int = 4,
) -> SelectionResult:
    """GA wrapper selection; the result's bands list the RGB bands first when include_rgb is on."""
    manifest.require_splits()
    dataset = PatchDataset.build(manifest, cubes, spec.patch_width, spec.mask_threshold)
    fixed = rgb_bands(dataset.wavelengths, spec) if spec.include_rgb else ()
    train = dataset.subset(Split.TRAIN)
    context = FitnessContext(train, fixed, spec)

    optimizer = GeneticBandOptimizer(spec.ga, dataset.n_bands, fixed, max_parallel_tasks)
    outcome = optimizer.multi_run(context.fitness)
    variable = outcome.best.band_set
    log(f"Selected bands {list(fixed)} + {list(variable)} (run {outcome.best_run}, CV F1 {outcome.best.fitness:.4f})")

    evaluation = evaluate_bands(
        manifest,
        bands=context.bands_for(variable),
        spec=spec,
        dataset=dataset,
        context=context,
    )
    return SelectionResult(
        evaluation=evaluation,
        variable_bands=variable,
        best_run=outcome.best_run,
        history=outcome.history,
        spec=spec,
    )
