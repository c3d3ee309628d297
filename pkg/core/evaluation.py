"""Confusion-matrix metrics and k-fold cross-validation of the SVM."""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np
from sklearn.model_selection import StratifiedKFold

from core.features import FeatureVector, Label
from core.svm import SvmConfig, fit_kernel, rbf_kernel


class FoldUnit(str, Enum):
    PATCH = "patch"
    STEM = "stem"


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with infected as the positive class."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
            tn=self.tn + other.tn,
        )


@dataclass(frozen=True)
class EvalReport:
    matrix: ConfusionMatrix
    precision: float
    recall: float
    f1: float
    healthy_acc: float
    infected_acc: float
    overall_acc: float

    def to_dict(self, bands: Sequence[int] | None = None, wavelengths: Sequence[float] | None = None) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "tp": self.matrix.tp,
            "fp": self.matrix.fp,
            "fn": self.matrix.fn,
            "tn": self.matrix.tn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "healthy_acc": self.healthy_acc,
            "infected_acc": self.infected_acc,
            "overall_acc": self.overall_acc,
        }
        if bands is not None:
            payload["bands"] = [int(band) for band in bands]
        if wavelengths is not None:
            payload["wavelengths"] = [float(nm) for nm in wavelengths]
        return payload


def _ratio(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator else 0.0


def metrics(m: ConfusionMatrix) -> EvalReport:
    """Precision, recall, F1 of the infected class plus per-class and overall accuracy.

    Zero denominators give 0 rather than NaN so F1 stays totally ordered.
    """
    if m.total == 0:
        raise ValueError("cannot derive metrics from an empty confusion matrix")
    precision = _ratio(m.tp, m.tp + m.fp)
    recall = _ratio(m.tp, m.tp + m.fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return EvalReport(
        matrix=m,
        precision=precision,
        recall=recall,
        f1=f1,
        healthy_acc=_ratio(m.tn, m.tn + m.fp) * 100.0,
        infected_acc=recall * 100.0,
        overall_acc=(m.tp + m.tn) / m.total * 100.0,
    )


def accumulate(pairs: Iterable[tuple[Label | str, Label | str]]) -> ConfusionMatrix:
    """Count (true, predicted) label pairs."""
    tp = fp = fn = tn = 0
    for truth, predicted in pairs:
        actual_infected = Label(truth) is Label.INFECTED
        predicted_infected = Label(predicted) is Label.INFECTED
        if actual_infected and predicted_infected:
            tp += 1
        elif predicted_infected:
            fp += 1
        elif actual_infected:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp=tp, fp=fp, fn=fn, tn=tn)


def matrix_from_masks(actual: np.ndarray, predicted: np.ndarray) -> ConfusionMatrix:
    actual = np.asarray(actual, dtype=bool)
    predicted = np.asarray(predicted, dtype=bool)
    return ConfusionMatrix(
        tp=int(np.sum(actual & predicted)),
        fp=int(np.sum(~actual & predicted)),
        fn=int(np.sum(actual & ~predicted)),
        tn=int(np.sum(~actual & ~predicted)),
    )


def assign_folds(
    infected: np.ndarray,
    groups: Sequence[str] | np.ndarray | None,
    k: int,
    seed: int,
) -> np.ndarray:
    """Fold id per sample from a seeded StratifiedKFold over units.

    With groups given, the units are whole groups (stems) and a group counts as
    infected if any of its samples is; otherwise every sample is its own unit.
    Within each class, fold sizes differ by at most one unit.
    """
    if k < 2:
        raise ValueError(f"fold count must be >= 2, got {k}")
    infected = np.asarray(infected, dtype=bool)
    n = infected.shape[0]

    if groups is None:
        unit_of = np.arange(n)
        unit_infected = infected.copy()
    else:
        group_array = np.asarray(groups)
        if group_array.shape[0] != n:
            raise ValueError(f"{group_array.shape[0]} group ids for {n} samples")
        _, first_seen, unit_of = np.unique(group_array, return_index=True, return_inverse=True)
        unit_infected = np.zeros(first_seen.size, dtype=bool)
        np.logical_or.at(unit_infected, unit_of, infected)

    for flag, name in ((False, Label.HEALTHY), (True, Label.INFECTED)):
        count = int(np.sum(unit_infected == flag))
        if count < k:
            raise ValueError(f"{count} {name.value} units cannot fill {k} folds")

    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    unit_fold = np.empty(unit_infected.size, dtype=np.int64)
    for fold, (_, held_out) in enumerate(splitter.split(np.zeros((unit_infected.size, 1)), unit_infected)):
        unit_fold[held_out] = fold
    return unit_fold[unit_of]


def cross_validate_arrays(
    x: np.ndarray,
    infected: np.ndarray,
    folds: np.ndarray,
    config: SvmConfig,
) -> ConfusionMatrix:
    """Train on each fold's complement, predict the fold, pool one confusion matrix."""
    x = np.asarray(x, dtype=np.float64)
    infected = np.asarray(infected, dtype=bool)
    y = np.where(infected, 1.0, -1.0)
    kernel = rbf_kernel(x, x, config.gamma)

    predicted = np.zeros_like(infected)
    for fold in np.unique(folds):
        held_out = folds == fold
        training = ~held_out
        if infected[training].all() or not infected[training].any():
            raise ValueError(f"fold {int(fold)}: training complement holds a single class")
        coefs, bias = fit_kernel(kernel[np.ix_(training, training)], y[training], config)
        scores = kernel[np.ix_(held_out, training)] @ coefs + bias
        predicted[held_out] = scores >= 0.0
    return matrix_from_masks(infected, predicted)


def kfold_cv(
    features: Sequence[FeatureVector],
    k: int = 10,
    fold_unit: FoldUnit | str = FoldUnit.PATCH,
    config: SvmConfig = SvmConfig(),
    seed: int = 0,
) -> EvalReport:
    if any(vector.label is None for vector in features):
        raise ValueError("cross-validation needs labeled features")
    x = np.array([vector.values for vector in features], dtype=np.float64)
    infected = np.array([vector.label is Label.INFECTED for vector in features])
    groups = [vector.stem_id for vector in features] if FoldUnit(fold_unit) is FoldUnit.STEM else None
    folds = assign_folds(infected, groups, k, seed)
    return metrics(cross_validate_arrays(x, infected, folds, config))
