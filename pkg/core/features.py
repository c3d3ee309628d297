"""Band lookup, patch tiling, patch labeling and mean-reflectance features."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
import pandas as pd

from core.cube_io import DataCube, InoculationEnd, StemRecord, Treatment

RGB_TARGETS_NM: tuple[float, float, float] = (475.56, 548.91, 652.14)


class Label(str, Enum):
    HEALTHY = "healthy"
    INFECTED = "infected"


@dataclass(frozen=True)
class BandMap:
    wavelengths: tuple[float, ...]
    rgb_bands: tuple[int, ...]

    @property
    def rgb_wavelengths(self) -> tuple[float, ...]:
        return tuple(self.wavelengths[index] for index in self.rgb_bands)


def nearest_band(wavelengths: Sequence[float] | np.ndarray, target_nm: float) -> int:
    """Index of the band nearest to target_nm; ties go to the lower index."""
    axis = np.asarray(wavelengths, dtype=np.float64)
    if axis.size == 0:
        raise ValueError("wavelength axis is empty")
    if target_nm < axis[0] or target_nm > axis[-1]:
        raise ValueError(f"target {target_nm} nm outside axis range [{axis[0]}, {axis[-1]}] nm")
    return int(np.argmin(np.abs(axis - target_nm)))


def build_band_map(
    wavelengths: Sequence[float] | np.ndarray,
    targets: Sequence[float] = RGB_TARGETS_NM,
) -> BandMap:
    axis = np.asarray(wavelengths, dtype=np.float64)
    if axis.size > 1 and not np.all(np.diff(axis) > 0):
        raise ValueError("wavelengths must be strictly increasing")
    bands = tuple(nearest_band(axis, target) for target in targets)
    return BandMap(wavelengths=tuple(float(w) for w in axis), rgb_bands=bands)


@dataclass(frozen=True)
class Patch:
    """Fixed-width slice of a stem image; patch_index 0 adjoins the inoculation point."""

    stem_id: str
    patch_index: int
    col_start: int
    col_stop: int
    label: Label | None = None

    @property
    def width(self) -> int:
        return self.col_stop - self.col_start

    @property
    def col_range(self) -> tuple[int, int]:
        return self.col_start, self.col_stop


@dataclass(frozen=True)
class FeatureVector:
    values: tuple[float, ...]
    label: Label | None
    stem_id: str
    patch_index: int


def make_patches(cube: DataCube, record: StemRecord, patch_width: int) -> list[Patch]:
    """Tile the longitudinal axis; remainder columns at the far end are dropped."""
    if patch_width < 1:
        raise ValueError(f"patch_width must be >= 1, got {patch_width}")
    if cube.cols < patch_width:
        raise ValueError(f"stem {record.stem_id}: {cube.cols} columns is narrower than patch width {patch_width}")

    count = cube.cols // patch_width
    patches: list[Patch] = []
    for index in range(count):
        if record.inoculation_end is InoculationEnd.LOW_COL:
            start = index * patch_width
        else:
            start = cube.cols - (index + 1) * patch_width
        patches.append(Patch(record.stem_id, index, start, start + patch_width))
    return patches


def label_patch(patch: Patch, record: StemRecord, scale_mm_per_px: float) -> Label:
    """Infected iff the patch's distance interval intersects [0, interior_mm)."""
    if record.treatment is Treatment.MOCK:
        return Label.HEALTHY
    start_mm = (patch.patch_index * patch.width) * scale_mm_per_px
    if record.infected_extent_mm > start_mm:
        return Label.INFECTED
    return Label.HEALTHY


def label_patches(patches: Sequence[Patch], record: StemRecord, scale_mm_per_px: float) -> list[Patch]:
    return [replace(patch, label=label_patch(patch, record, scale_mm_per_px)) for patch in patches]


def _validate_bands(band_indices: Sequence[int], n_bands: int) -> list[int]:
    bands = [int(band) for band in band_indices]
    if len(set(bands)) != len(bands):
        raise ValueError(f"duplicate band indices in {bands}")
    for band in bands:
        if band < 0 or band >= n_bands:
            raise ValueError(f"band index {band} outside [0, {n_bands - 1}]")
    return bands


def patch_means(
    cube: DataCube,
    patches: Sequence[Patch],
    bands: Sequence[int] | None = None,
    mask_threshold: float | None = None,
) -> np.ndarray:
    """Mean reflectance per patch, shape (len(patches), len(bands)).

    With mask_threshold set, only pixels whose all-band mean reflectance reaches
    the threshold count; a patch with no such pixel falls back to all pixels.
    """
    selected = list(range(cube.n_bands)) if bands is None else _validate_bands(bands, cube.n_bands)
    out = np.empty((len(patches), len(selected)), dtype=np.float64)
    for row, patch in enumerate(patches):
        block = cube.reflectance[:, patch.col_start:patch.col_stop, :]
        if mask_threshold is not None:
            foreground = block.mean(axis=2, dtype=np.float64) >= mask_threshold
            if foreground.any():
                out[row] = block[foreground][:, selected].mean(axis=0, dtype=np.float64)
                continue
        out[row] = block[:, :, selected].mean(axis=(0, 1), dtype=np.float64)
    return out


def extract_features(
    cube: DataCube,
    patches: Sequence[Patch],
    band_indices: Sequence[int],
    mask_threshold: float | None = None,
) -> list[FeatureVector]:
    means = patch_means(cube, patches, band_indices, mask_threshold)
    return [
        FeatureVector(
            values=tuple(float(v) for v in means[row]),
            label=patch.label,
            stem_id=patch.stem_id,
            patch_index=patch.patch_index,
        )
        for row, patch in enumerate(patches)
    ]


@dataclass(frozen=True, eq=False)
class SpectrumCurves:
    """Per-label mean reflectance curves; a label with no patches has no curve."""

    wavelengths: np.ndarray
    healthy: np.ndarray | None
    infected: np.ndarray | None

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"wavelength_nm": self.wavelengths})
        if self.healthy is not None:
            frame["healthy_mean"] = self.healthy
        if self.infected is not None:
            frame["infected_mean"] = self.infected
        return frame


def spectrum_from_means(
    means: np.ndarray,
    labels: Sequence[Label],
    wavelengths: Sequence[float] | np.ndarray,
) -> SpectrumCurves:
    """Average per-patch spectra by label."""
    means = np.asarray(means, dtype=np.float64)
    if means.shape[0] == 0:
        raise ValueError("mean spectrum needs at least one patch")
    if means.shape[0] != len(labels):
        raise ValueError(f"{means.shape[0]} patch spectra but {len(labels)} labels")

    label_array = np.array([Label(label).value for label in labels])
    curves: dict[Label, np.ndarray | None] = {}
    for label in Label:
        rows = label_array == label.value
        curves[label] = means[rows].mean(axis=0) if rows.any() else None
    return SpectrumCurves(
        wavelengths=np.asarray(wavelengths, dtype=np.float64),
        healthy=curves[Label.HEALTHY],
        infected=curves[Label.INFECTED],
    )


def mean_spectrum(
    cube: DataCube,
    patches: Sequence[Patch],
    mask_threshold: float | None = None,
) -> SpectrumCurves:
    if not patches:
        raise ValueError("mean spectrum needs at least one patch")
    if any(patch.label is None for patch in patches):
        raise ValueError("mean spectrum needs labeled patches")
    means = patch_means(cube, patches, mask_threshold=mask_threshold)
    return spectrum_from_means(means, [patch.label for patch in patches], cube.wavelengths)
