"""Hyperspectral cube file format and ground-truth manifest loading."""

from __future__ import annotations

import csv
import io
from collections.abc import Iterator
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from utils.logger import log

CUBE_MAGIC = b"HSC1"
CUBE_VERSION = 1
HEADER_DTYPE = np.dtype(
    [
        ("magic", "S4"),
        ("version", "<u4"),
        ("rows", "<u4"),
        ("cols", "<u4"),
        ("n_bands", "<u4"),
    ]
)
HEADER_SIZE = HEADER_DTYPE.itemsize
WAVELENGTH_DTYPE = np.dtype("<f8")
SAMPLE_DTYPE = np.dtype("<f4")

MANIFEST_COLUMNS = [
    "stem_id",
    "cube_path",
    "genotype",
    "treatment",
    "dai",
    "interior_mm",
    "exterior_mm",
    "dead_mm",
    "replication",
    "split",
    "inoculation_end",
]
SCALE_PREFIX = "# scale_mm_per_px="


class CubeFormatError(ValueError):
    """Raised when a cube file or in-memory cube breaks the format invariants."""


class ManifestError(ValueError):
    """Raised when a manifest file is malformed or inconsistent."""


class Treatment(str, Enum):
    INOCULATED = "inoculated"
    MOCK = "mock"


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


class InoculationEnd(str, Enum):
    LOW_COL = "low_col"
    HIGH_COL = "high_col"


@dataclass(frozen=True, eq=False)
class DataCube:
    """Reflectance cube indexed (row, col, band) with its wavelength axis in nm."""

    wavelengths: np.ndarray
    reflectance: np.ndarray

    def __post_init__(self) -> None:
        # read-only views; arrays already in the storage dtype are not copied
        wavelengths = np.asarray(self.wavelengths, dtype=np.float64).view()
        reflectance = np.asarray(self.reflectance, dtype=np.float32).view()
        wavelengths.setflags(write=False)
        reflectance.setflags(write=False)
        object.__setattr__(self, "wavelengths", wavelengths)
        object.__setattr__(self, "reflectance", reflectance)

    @property
    def rows(self) -> int:
        return int(self.reflectance.shape[0])

    @property
    def cols(self) -> int:
        return int(self.reflectance.shape[1])

    @property
    def n_bands(self) -> int:
        return int(self.reflectance.shape[2])

    def validate(self) -> None:
        """Raise CubeFormatError unless every cube invariant holds."""
        if self.reflectance.ndim != 3:
            raise CubeFormatError(f"reflectance must be 3-D, got shape {self.reflectance.shape}")
        if self.rows < 1 or self.cols < 1 or self.n_bands < 1:
            raise CubeFormatError(f"cube dimensions must be >= 1, got {self.reflectance.shape}")
        if self.wavelengths.ndim != 1 or self.wavelengths.size != self.n_bands:
            raise CubeFormatError(
                f"wavelength axis has {self.wavelengths.size} entries for {self.n_bands} bands"
            )
        if self.n_bands > 1 and not np.all(np.diff(self.wavelengths) > 0):
            first = int(np.argmax(np.diff(self.wavelengths) <= 0))
            raise CubeFormatError(f"wavelengths not strictly increasing at index {first + 1}")
        if not np.all(np.isfinite(self.wavelengths)):
            raise CubeFormatError("wavelength axis contains non-finite values")

        valid = np.isfinite(self.reflectance) & (self.reflectance >= 0.0) & (self.reflectance <= 1.0)
        if not valid.all():
            row, col, band = (int(v) for v in np.argwhere(~valid)[0])
            value = float(self.reflectance[row, col, band])
            raise CubeFormatError(
                f"reflectance {value!r} out of [0, 1] at (row={row}, col={col}, band={band})"
            )

    def equals(self, other: DataCube) -> bool:
        """Bit-exact field-for-field comparison."""
        return (
            self.reflectance.shape == other.reflectance.shape
            and np.array_equal(self.wavelengths, other.wavelengths)
            and np.array_equal(self.reflectance, other.reflectance)
        )


def read_cube(path: str | Path) -> DataCube:
    """Load and validate a cube file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"cube file not found: {path}")

    payload = path.read_bytes()
    if len(payload) < HEADER_SIZE:
        raise CubeFormatError(f"{path}: file too short for header ({len(payload)} bytes)")

    header = np.frombuffer(payload, dtype=HEADER_DTYPE, count=1)[0]
    if bytes(header["magic"]) != CUBE_MAGIC:
        raise CubeFormatError(f"{path}: bad magic {bytes(header['magic'])!r}")
    if int(header["version"]) != CUBE_VERSION:
        raise CubeFormatError(f"{path}: unsupported version {int(header['version'])}")

    rows, cols, n_bands = int(header["rows"]), int(header["cols"]), int(header["n_bands"])
    expected = HEADER_SIZE + n_bands * WAVELENGTH_DTYPE.itemsize + rows * cols * n_bands * SAMPLE_DTYPE.itemsize
    if len(payload) != expected:
        raise CubeFormatError(
            f"{path}: header declares {rows}x{cols}x{n_bands} "
            f"({expected} bytes) but file holds {len(payload)} bytes"
        )

    wavelengths = np.frombuffer(payload, dtype=WAVELENGTH_DTYPE, count=n_bands, offset=HEADER_SIZE)
    samples = np.frombuffer(
        payload,
        dtype=SAMPLE_DTYPE,
        count=rows * cols * n_bands,
        offset=HEADER_SIZE + n_bands * WAVELENGTH_DTYPE.itemsize,
    )
    cube = DataCube(wavelengths=wavelengths, reflectance=samples.reshape(rows, cols, n_bands))
    try:
        cube.validate()
    except CubeFormatError as exc:
        raise CubeFormatError(f"{path}: {exc}") from exc
    return cube


def read_axis(path: str | Path) -> np.ndarray:
    """Wavelength axis of a cube file without loading its samples."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"cube file not found: {path}")
    with path.open("rb") as handle:
        raw = handle.read(HEADER_SIZE)
        if len(raw) < HEADER_SIZE:
            raise CubeFormatError(f"{path}: file too short for header ({len(raw)} bytes)")
        header = np.frombuffer(raw, dtype=HEADER_DTYPE, count=1)[0]
        if bytes(header["magic"]) != CUBE_MAGIC:
            raise CubeFormatError(f"{path}: bad magic {bytes(header['magic'])!r}")
        if int(header["version"]) != CUBE_VERSION:
            raise CubeFormatError(f"{path}: unsupported version {int(header['version'])}")
        n_bands = int(header["n_bands"])
        axis = np.frombuffer(handle.read(n_bands * WAVELENGTH_DTYPE.itemsize), dtype=WAVELENGTH_DTYPE)
    if axis.size != n_bands:
        raise CubeFormatError(f"{path}: truncated wavelength axis")
    return axis.astype(np.float64)


def write_cube(cube: DataCube, path: str | Path) -> None:
    """Validate a cube and write it in the flat binary format."""
    cube.validate()
    path = Path(path)
    header = np.zeros(1, dtype=HEADER_DTYPE)
    header["magic"] = CUBE_MAGIC
    header["version"] = CUBE_VERSION
    header["rows"] = cube.rows
    header["cols"] = cube.cols
    header["n_bands"] = cube.n_bands

    with path.open("wb") as handle:
        handle.write(header.tobytes())
        handle.write(cube.wavelengths.astype(WAVELENGTH_DTYPE).tobytes())
        handle.write(np.ascontiguousarray(cube.reflectance, dtype=SAMPLE_DTYPE).tobytes())


@dataclass(frozen=True)
class StemRecord:
    """Ground truth for one imaged stem."""

    stem_id: str
    cube_path: str
    genotype: str
    treatment: Treatment
    dai: int
    interior_mm: float | None
    exterior_mm: float | None
    dead_mm: float | None
    replication: int
    split: Split
    inoculation_end: InoculationEnd

    @property
    def infected_extent_mm(self) -> float:
        """Interior lesion length, with an absent value counting as 0 mm."""
        return float(self.interior_mm or 0.0)


@dataclass(frozen=True)
class Manifest:
    records: tuple[StemRecord, ...]
    scale_mm_per_px: float
    base_dir: Path = field(default=Path("."), compare=False)

    def split_records(self, split: Split) -> list[StemRecord]:
        return [record for record in self.records if record.split == split]

    def cube_file(self, record: StemRecord) -> Path:
        return self.base_dir / record.cube_path

    def require_splits(self) -> None:
        """Raise ManifestError unless both train and test records exist."""
        for split in (Split.TRAIN, Split.TEST):
            if not self.split_records(split):
                raise ManifestError(f"manifest has no {split.value} records")


def _parse_optional_mm(value: str, column: str, stem_id: str) -> float | None:
    text = value.strip()
    if not text:
        return None
    try:
        number = float(text)
    except ValueError as exc:
        raise ManifestError(f"stem {stem_id}: non-numeric {column} {value!r}") from exc
    if not np.isfinite(number) or number < 0:
        raise ManifestError(f"stem {stem_id}: {column} must be a finite value >= 0, got {value!r}")
    return number


def _parse_int(value: str, column: str, stem_id: str) -> int:
    try:
        return int(value.strip())
    except ValueError as exc:
        raise ManifestError(f"stem {stem_id}: non-integer {column} {value!r}") from exc


def _parse_enum(enum_type: type[Enum], value: str, column: str, stem_id: str) -> Enum:
    try:
        return enum_type(value.strip())
    except ValueError as exc:
        allowed = ", ".join(member.value for member in enum_type)
        raise ManifestError(f"stem {stem_id}: unknown {column} {value!r} (expected {allowed})") from exc


def _parse_record(row: dict[str, str]) -> StemRecord:
    stem_id = row["stem_id"].strip()
    if not stem_id:
        raise ManifestError("record with empty stem_id")

    treatment = _parse_enum(Treatment, row["treatment"], "treatment", stem_id)
    interior = _parse_optional_mm(row["interior_mm"], "interior_mm", stem_id)
    if treatment is Treatment.INOCULATED and interior is None:
        raise ManifestError(f"stem {stem_id}: inoculated stem is missing interior_mm")

    dai = _parse_int(row["dai"], "dai", stem_id)
    if dai < 0:
        raise ManifestError(f"stem {stem_id}: dai must be >= 0, got {dai}")

    return StemRecord(
        stem_id=stem_id,
        cube_path=row["cube_path"].strip(),
        genotype=row["genotype"].strip(),
        treatment=treatment,
        dai=dai,
        interior_mm=interior,
        exterior_mm=_parse_optional_mm(row["exterior_mm"], "exterior_mm", stem_id),
        dead_mm=_parse_optional_mm(row["dead_mm"], "dead_mm", stem_id),
        replication=_parse_int(row["replication"], "replication", stem_id),
        split=_parse_enum(Split, row["split"], "split", stem_id),
        inoculation_end=_parse_enum(InoculationEnd, row["inoculation_end"], "inoculation_end", stem_id),
    )


def read_manifest(path: str | Path) -> Manifest:
    """Parse the manifest CSV; cube paths resolve relative to its directory."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not text.strip():
        raise ManifestError(f"{path}: no records")
    if not lines[0].startswith(SCALE_PREFIX):
        raise ManifestError(f"{path}: first line must be '{SCALE_PREFIX}<value>'")
    try:
        scale = float(lines[0][len(SCALE_PREFIX):])
    except ValueError as exc:
        raise ManifestError(f"{path}: bad scale line {lines[0]!r}") from exc
    if not np.isfinite(scale) or scale <= 0:
        raise ManifestError(f"{path}: scale_mm_per_px must be > 0, got {scale}")

    body = "\n".join(lines[1:])
    if not body.strip():
        raise ManifestError(f"{path}: no records")
    frame = pd.read_csv(io.StringIO(body), dtype=str, keep_default_na=False)
    missing = [column for column in MANIFEST_COLUMNS if column not in frame.columns]
    if missing:
        raise ManifestError(f"{path}: missing columns {', '.join(missing)}")
    if frame.empty:
        raise ManifestError(f"{path}: no records")

    records: list[StemRecord] = []
    seen: set[str] = set()
    for row in frame[MANIFEST_COLUMNS].to_dict(orient="records"):
        record = _parse_record(row)
        if record.stem_id in seen:
            raise ManifestError(f"{path}: duplicate stem_id {record.stem_id}")
        seen.add(record.stem_id)
        records.append(record)

    log(f"Manifest loaded: {len(records)} stems from {path}")
    return Manifest(records=tuple(records), scale_mm_per_px=scale, base_dir=path.parent)


def _format_optional(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write a manifest in the format read_manifest accepts."""
    path = Path(path)
    rows = [
        {
            "stem_id": record.stem_id,
            "cube_path": record.cube_path,
            "genotype": record.genotype,
            "treatment": record.treatment.value,
            "dai": str(record.dai),
            "interior_mm": _format_optional(record.interior_mm),
            "exterior_mm": _format_optional(record.exterior_mm),
            "dead_mm": _format_optional(record.dead_mm),
            "replication": str(record.replication),
            "split": record.split.value,
            "inoculation_end": record.inoculation_end.value,
        }
        for record in manifest.records
    ]
    frame = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(f"{SCALE_PREFIX}{manifest.scale_mm_per_px!r}\n")
        frame.to_csv(handle, index=False, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)


def iter_cubes(manifest: Manifest, records: list[StemRecord] | None = None) -> Iterator[tuple[StemRecord, DataCube]]:
    """Yield (record, cube) pairs one at a time, loading each cube lazily."""
    for record in records if records is not None else manifest.records:
        cube = read_cube(manifest.cube_file(record))
        log(f"Cube loaded for {record.stem_id}: {cube.rows}x{cube.cols}x{cube.n_bands}")
        yield record, cube
