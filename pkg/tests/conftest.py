from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from core.cube_io import DataCube, InoculationEnd, Manifest, Split, StemRecord, Treatment, read_manifest
from core.synth import SynthSpec, generate
from utils.logger import register_listener, set_console, unregister_listener

# Small cubes: 40 bands over 400-990 nm put the RGB bands at 5, 10 and 17.
SMALL_SYNTH = SynthSpec(
    n_stems_train=10,
    n_stems_test=6,
    rows=8,
    cols=64,
    n_bands=40,
    wavelength_lo=400.0,
    wavelength_hi=990.0,
    planted_bands=(25, 33),
    band_halfwidth=1,
    lesion_mm_range=(2.0, 12.0),
    patch_width=8,
    seed=11,
)


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption("--runslow", action="store_true", default=False, help="run end-to-end synthetic runs")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _quiet_console():
    set_console(False)
    yield
    set_console(True)


@pytest.fixture
def log_lines():
    lines: list[str] = []
    register_listener(lines.append)
    yield lines
    unregister_listener(lines.append)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    out = tmp_path_factory.mktemp("synth")
    set_console(False)
    generate(SMALL_SYNTH, out)
    set_console(True)
    return out


@pytest.fixture(scope="session")
def synth_manifest(synth_dir: Path) -> Manifest:
    return read_manifest(synth_dir / "manifest.csv")


def make_record(
    stem_id: str = "s1",
    *,
    treatment: Treatment = Treatment.INOCULATED,
    interior_mm: float | None = 10.0,
    dai: int = 3,
    split: Split = Split.TRAIN,
    end: InoculationEnd = InoculationEnd.LOW_COL,
) -> StemRecord:
    return StemRecord(
        stem_id=stem_id,
        cube_path=f"cubes/{stem_id}.hsc",
        genotype="G1",
        treatment=treatment,
        dai=dai,
        interior_mm=interior_mm if treatment is Treatment.INOCULATED else None,
        exterior_mm=None,
        dead_mm=None,
        replication=1,
        split=split,
        inoculation_end=end,
    )


def make_cube(rows: int = 4, cols: int = 16, n_bands: int = 5, seed: int = 0) -> DataCube:
    rng = np.random.default_rng(seed)
    return DataCube(
        wavelengths=np.linspace(400.0, 900.0, n_bands),
        reflectance=rng.uniform(0.0, 1.0, size=(rows, cols, n_bands)).astype(np.float32),
    )
