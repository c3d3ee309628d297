"""Synthetic stem datasets with planted discriminative bands and known lesions."""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

from core.cube_io import (
    DataCube,
    InoculationEnd,
    Manifest,
    Split,
    StemRecord,
    Treatment,
    write_cube,
    write_manifest,
)
from core.features import RGB_TARGETS_NM, nearest_band
from utils.config import APP_CONFIG
from utils.logger import log

MAX_CLAMPED_FRACTION = 1e-3


class SynthMode(str, Enum):
    LOCALIZED = "localized"
    BROAD = "broad"


@dataclass(frozen=True)
class SynthSpec:
    n_stems_train: int = 24
    n_stems_test: int = 12
    rows: int = 500
    cols: int = 1600
    n_bands: int = 240
    wavelength_lo: float = 382.0
    wavelength_hi: float = 1032.0
    planted_bands: tuple[int, ...] = (40, 120, 200)
    band_halfwidth: int = 2
    attenuation: float = 0.7
    noise_sd: float = 0.02
    mode: SynthMode = SynthMode.LOCALIZED
    broad_attenuation: float = 0.9
    lesion_mm_range: tuple[float, float] = (10.0, 70.0)
    scale_mm_per_px: float = APP_CONFIG.default_scale_mm_per_px
    dai_values: tuple[int, ...] = (3, 6, 9, 12, 15)
    patch_width: int = 64
    bands_per_lesion: int = 2
    lesions_grow_with_dai: bool = True
    seed: int = 0

    def wavelengths(self) -> np.ndarray:
        return np.linspace(self.wavelength_lo, self.wavelength_hi, self.n_bands)

    def lesion_range(self, dai: int) -> tuple[float, float]:
        """Interior lesion interval for a dai; later dai get a later slice of lesion_mm_range."""
        low, high = self.lesion_mm_range
        if not self.lesions_grow_with_dai:
            return low, high
        ordered = sorted(set(self.dai_values))
        width = (high - low) / len(ordered)
        rank = ordered.index(dai)
        return low + rank * width, low + (rank + 1) * width

    def expressed_bands(self, lesion_index: int) -> tuple[int, ...]:
        """Planted bands darkened by the lesion_index-th lesion of a split.

        Lesions rotate through the planted bands, bands_per_lesion at a time,
        so with fewer than all bands per lesion no single band marks every lesion.
        """
        planted = self.planted_bands
        if not planted:
            return ()
        count = min(self.bands_per_lesion, len(planted))
        start = lesion_index % len(planted)
        return tuple(sorted(planted[(start + step) % len(planted)] for step in range(count)))

    def validate(self) -> None:
        if self.n_stems_train < 0 or self.n_stems_test < 0 or self.n_stems_train + self.n_stems_test == 0:
            raise ValueError("need at least one stem")
        if self.rows < 1 or self.cols < 1 or self.n_bands < 1:
            raise ValueError(f"cube dimensions must be >= 1, got {self.rows}x{self.cols}x{self.n_bands}")
        if self.n_bands > 1 and not self.wavelength_lo < self.wavelength_hi:
            raise ValueError("wavelength_lo must be below wavelength_hi")
        if not 0.0 < self.attenuation <= 1.0:
            raise ValueError(f"attenuation must be within (0, 1], got {self.attenuation}")
        if not 0.0 < self.broad_attenuation <= 1.0:
            raise ValueError(f"broad_attenuation must be within (0, 1], got {self.broad_attenuation}")
        if self.noise_sd < 0:
            raise ValueError(f"noise_sd must be >= 0, got {self.noise_sd}")
        if self.band_halfwidth < 0:
            raise ValueError(f"band_halfwidth must be >= 0, got {self.band_halfwidth}")
        low, high = self.lesion_mm_range
        if low < 0 or high < low:
            raise ValueError(f"bad lesion_mm_range {self.lesion_mm_range}")
        if self.scale_mm_per_px <= 0:
            raise ValueError(f"scale_mm_per_px must be > 0, got {self.scale_mm_per_px}")
        if not self.dai_values or any(dai < 0 for dai in self.dai_values):
            raise ValueError(f"bad dai_values {self.dai_values}")
        if self.patch_width < 1:
            raise ValueError(f"patch_width must be >= 1, got {self.patch_width}")
        if self.bands_per_lesion < 1:
            raise ValueError(f"bands_per_lesion must be >= 1, got {self.bands_per_lesion}")
        for band in self.planted_bands:
            if not 0 <= band < self.n_bands:
                raise ValueError(f"planted band {band} outside [0, {self.n_bands - 1}]")
        if SynthMode(self.mode) is SynthMode.LOCALIZED:
            if not self.planted_bands:
                raise ValueError("localized mode needs planted bands")
            rgb = set(_rgb_bands(self.wavelengths()))
            for band in self.planted_bands:
                spread = set(range(band - self.band_halfwidth, band + self.band_halfwidth + 1))
                if spread & rgb:
                    raise ValueError(f"planted band {band} (+/-{self.band_halfwidth}) overlaps RGB bands {sorted(rgb)}")


def _rgb_bands(wavelengths: np.ndarray) -> list[int]:
    if wavelengths.size == 0:
        return []
    return [
        nearest_band(wavelengths, target)
        for target in RGB_TARGETS_NM
        if wavelengths[0] <= target <= wavelengths[-1]
    ]


def base_spectrum(wavelengths: np.ndarray) -> np.ndarray:
    """Healthy stem reflectance: 0.08 floor, green bump at 550 nm, red edge at 710 nm, 0.48 NIR plateau."""
    wavelengths = np.asarray(wavelengths, dtype=np.float64)
    green = 0.04 * np.exp(-(((wavelengths - 550.0) / 40.0) ** 2))
    red_edge = 0.40 / (1.0 + np.exp(-(wavelengths - 710.0) / 15.0))
    return 0.08 + green + red_edge


def lesion_factors(spec: SynthSpec, expressed: Sequence[int]) -> np.ndarray:
    """Reflectance multiplier for lesion pixels darkened at the expressed planted bands."""
    factors = np.ones(spec.n_bands)
    if SynthMode(spec.mode) is SynthMode.BROAD:
        factors *= spec.broad_attenuation
    darkened = np.zeros(spec.n_bands, dtype=bool)
    for band in expressed:
        darkened[max(0, band - spec.band_halfwidth): band + spec.band_halfwidth + 1] = True
    factors[darkened] *= spec.attenuation
    return factors


def band_factors(spec: SynthSpec) -> np.ndarray:
    """Full-depth multiplier: a lesion darkened at every planted band."""
    return lesion_factors(spec, spec.planted_bands)


def mean_lesion_factors(spec: SynthSpec) -> np.ndarray:
    """Multiplier averaged over one full rotation of expressed band sets."""
    cycle = max(len(spec.planted_bands), 1)
    return np.mean([lesion_factors(spec, spec.expressed_bands(index)) for index in range(cycle)], axis=0)


def describe(spec: SynthSpec) -> dict[str, Any]:
    """Ground truth the generator plants, for assertions and truth.json."""
    wavelengths = spec.wavelengths()
    healthy = base_spectrum(wavelengths)
    return {
        "planted_bands": [int(band) for band in spec.planted_bands],
        "band_halfwidth": spec.band_halfwidth,
        "attenuation": spec.attenuation,
        "broad_attenuation": spec.broad_attenuation,
        "bands_per_lesion": min(spec.bands_per_lesion, len(spec.planted_bands)),
        "mode": SynthMode(spec.mode).value,
        "noise_sd": spec.noise_sd,
        "patch_width": spec.patch_width,
        "patch_mean_noise_sd": spec.noise_sd / float(np.sqrt(spec.rows * spec.patch_width)),
        "lesion_mm_by_dai": {str(dai): list(spec.lesion_range(dai)) for dai in sorted(set(spec.dai_values))},
        "rgb_bands": _rgb_bands(wavelengths),
        "wavelengths": wavelengths.tolist(),
        "healthy_mean": healthy.tolist(),
        "lesion_mean": (healthy * band_factors(spec)).tolist(),
        "infected_mean": (healthy * mean_lesion_factors(spec)).tolist(),
        "seed": spec.seed,
    }


@dataclass(frozen=True)
class _StemPlan:
    position: int
    split: Split
    index: int
    treatment: Treatment
    dai: int
    inoculation_end: InoculationEnd
    replication: int
    genotype: str
    expressed_bands: tuple[int, ...]


def _plan_stems(spec: SynthSpec) -> list[_StemPlan]:
    plans: list[_StemPlan] = []
    for split, count in ((Split.TRAIN, spec.n_stems_train), (Split.TEST, spec.n_stems_test)):
        for index in range(count):
            within = index // 2
            plans.append(
                _StemPlan(
                    position=len(plans),
                    split=split,
                    index=index,
                    treatment=Treatment.INOCULATED if index % 2 == 0 else Treatment.MOCK,
                    dai=spec.dai_values[within % len(spec.dai_values)],
                    inoculation_end=InoculationEnd.LOW_COL if within % 2 == 0 else InoculationEnd.HIGH_COL,
                    replication=index % 4 + 1,
                    genotype=f"G{within % 4 + 1}",
                    expressed_bands=spec.expressed_bands(within) if index % 2 == 0 else (),
                )
            )
    return plans


def _lesion_columns(cols: int, lesion_px: int, end: InoculationEnd) -> slice:
    extent = min(lesion_px, cols)
    if end is InoculationEnd.LOW_COL:
        return slice(0, extent)
    return slice(cols - extent, cols)


def _generate_stem(
    spec: SynthSpec,
    plan: _StemPlan,
    rng: np.random.Generator,
    wavelengths: np.ndarray,
    healthy: np.ndarray,
) -> tuple[StemRecord, DataCube, int]:
    lesion_px = 0
    interior = exterior = dead = None
    if plan.treatment is Treatment.INOCULATED:
        low, high = spec.lesion_range(plan.dai)
        lesion_px = int(round(rng.uniform(low, high) / spec.scale_mm_per_px))
        interior = lesion_px * spec.scale_mm_per_px
        exterior = round(interior * rng.uniform(0.6, 1.0), 2)
        dead = round(interior * rng.uniform(0.3, 0.6), 2)

    cube = rng.standard_normal((spec.rows, spec.cols, spec.n_bands), dtype=np.float32)
    cube *= np.float32(spec.noise_sd)
    cube += healthy.astype(np.float32)
    if lesion_px > 0:
        columns = _lesion_columns(spec.cols, lesion_px, plan.inoculation_end)
        cube[:, columns, :] += (healthy * (lesion_factors(spec, plan.expressed_bands) - 1.0)).astype(np.float32)

    clamped = int(np.count_nonzero((cube < 0.0) | (cube > 1.0)))
    np.clip(cube, 0.0, 1.0, out=cube)

    stem_id = f"{plan.split.value}-{plan.index:03d}"
    record = StemRecord(
        stem_id=stem_id,
        cube_path=f"{APP_CONFIG.cube_dir}/{stem_id}{APP_CONFIG.cube_suffix}",
        genotype=plan.genotype,
        treatment=plan.treatment,
        dai=plan.dai,
        interior_mm=interior,
        exterior_mm=exterior,
        dead_mm=dead,
        replication=plan.replication,
        split=plan.split,
        inoculation_end=plan.inoculation_end,
    )
    return record, DataCube(wavelengths=wavelengths, reflectance=cube), clamped


def generate(spec: SynthSpec, out_dir: str | Path) -> Manifest:
    """Write cubes, manifest.csv and truth.json under out_dir; returns the manifest."""
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / APP_CONFIG.cube_dir).mkdir(parents=True, exist_ok=True)

    wavelengths = spec.wavelengths()
    healthy = base_spectrum(wavelengths)
    plans = _plan_stems(spec)
    streams = np.random.SeedSequence(spec.seed).spawn(len(plans))

    records: list[StemRecord] = []
    clamped_total = 0
    for plan, stream in zip(plans, streams, strict=True):
        record, cube, clamped = _generate_stem(spec, plan, np.random.default_rng(stream), wavelengths, healthy)
        write_cube(cube, out_dir / record.cube_path)
        records.append(record)
        clamped_total += clamped
        log(f"Synthetic stem {record.stem_id} written ({record.treatment.value}, interior={record.interior_mm})")

    samples = len(plans) * spec.rows * spec.cols * spec.n_bands
    clamped_fraction = clamped_total / samples
    log(f"Clamped {clamped_total} of {samples} samples ({clamped_fraction:.2e})")
    if clamped_fraction >= MAX_CLAMPED_FRACTION:
        raise ValueError(f"infeasible spec: {clamped_fraction:.2%} of samples clamped to [0, 1]")

    manifest = Manifest(records=tuple(records), scale_mm_per_px=spec.scale_mm_per_px, base_dir=out_dir)
    write_manifest(manifest, out_dir / APP_CONFIG.manifest_file)

    truth = describe(spec)
    truth["spec"] = _jsonable(asdict(spec))
    truth["clamped_samples"] = clamped_total
    truth["clamped_fraction"] = clamped_fraction
    truth["expressed_bands"] = {
        record.stem_id: list(plan.expressed_bands)
        for record, plan in zip(records, plans, strict=True)
        if plan.treatment is Treatment.INOCULATED
    }
    (out_dir / APP_CONFIG.truth_file).write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _jsonable(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {key: _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    return value
