"""Optical-constants database for the reconfigurable thin-film unit.

Indices are data, not code: the default table ships as ``data/materials.yaml``
and any other file with the same layout can be loaded instead.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np
import yaml

from .errors import DomainError, ParseError

#: Selectable layer materials, in index order 0..5.
LAYER_MATERIALS: tuple[str, ...] = ("Si3N4", "Al", "SiO2", "Au", "ITO", "GST")
GST = 5
ITO = 4
PASSIVE_MATERIALS = LAYER_MATERIALS[:5]

_REQUIRED = ("Si3N4", "Al", "SiO2", "Au", "ITO", "GST_amorphous", "GST_crystalline")


@dataclass(frozen=True)
class MaterialsTable:
    """Complex indices of every selectable material at one wavelength."""

    entries: Mapping[str, complex]
    gst_amorphous: complex
    gst_crystalline: complex
    lambda_nm: float
    ambient_index: float = 1.0
    substrate_index: float = 1.0
    source: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.lambda_nm > 0:
            raise DomainError(f"lambda_nm must be positive, got {self.lambda_nm}")
        for name in PASSIVE_MATERIALS:
            if name not in self.entries:
                raise DomainError(f"materials table lacks {name!r}")
        for name, idx in [*self.entries.items(),
                          ("GST_amorphous", self.gst_amorphous),
                          ("GST_crystalline", self.gst_crystalline)]:
            if not idx.real > 0:
                raise DomainError(f"{name}: n must be > 0, got {idx.real}")
            if idx.imag < 0:
                raise DomainError(f"{name}: k must be >= 0 (passive media), got {idx.imag}")
        if not (self.ambient_index > 0 and self.substrate_index > 0):
            raise DomainError("bounding media must have positive real indices")
        object.__setattr__(self, "entries", MappingProxyType(dict(self.entries)))

    def index_of(self, material: int, gst_state: float | None = None) -> complex:
        """Complex index of the layer material ``material`` (0..5)."""
        if material == GST:
            return gst_index(self, 0.0 if gst_state is None else gst_state)
        if not 0 <= material < GST:
            raise DomainError(f"material index {material} outside 0..5")
        return self.entries[LAYER_MATERIALS[material]]

    def passive_indices(self) -> np.ndarray:
        return np.array([self.entries[m] for m in PASSIVE_MATERIALS], dtype=complex)

    def with_bounds(self, ambient: float | None = None, substrate: float | None = None) -> MaterialsTable:
        return MaterialsTable(
            dict(self.entries), self.gst_amorphous, self.gst_crystalline, self.lambda_nm,
            self.ambient_index if ambient is None else ambient,
            self.substrate_index if substrate is None else substrate,
            self.source,
        )

    def with_gst(self, amorphous: complex, crystalline: complex) -> MaterialsTable:
        return MaterialsTable(dict(self.entries), complex(amorphous), complex(crystalline),
                              self.lambda_nm, self.ambient_index, self.substrate_index, self.source)

    def rows(self) -> list[tuple[str, float, float]]:
        out = [(name, val.real, val.imag) for name, val in self.entries.items()]
        out.append(("GST_amorphous", self.gst_amorphous.real, self.gst_amorphous.imag))
        out.append(("GST_crystalline", self.gst_crystalline.real, self.gst_crystalline.imag))
        return out


def gst_index(table: MaterialsTable, s: float) -> complex:
    """GST index at crystalline fraction ``s``, linear in n and k separately."""
    if not 0.0 <= s <= 1.0:
        raise DomainError(f"crystalline fraction must lie in [0, 1], got {s}")
    a, c = table.gst_amorphous, table.gst_crystalline
    return complex((1 - s) * a.real + s * c.real, (1 - s) * a.imag + s * c.imag)


def gst_indices(table: MaterialsTable, s: np.ndarray) -> np.ndarray:
    """Vectorised :func:`gst_index`."""
    s = np.asarray(s, dtype=float)
    if np.any((s < 0) | (s > 1)):
        raise DomainError("crystalline fractions must lie in [0, 1]")
    a, c = table.gst_amorphous, table.gst_crystalline
    return ((1 - s) * a.real + s * c.real) + 1j * ((1 - s) * a.imag + s * c.imag)


@dataclass(frozen=True)
class MaterialsDatabase:
    """Indices tabulated at one or more wavelengths."""

    wavelengths_nm: tuple[float, ...]
    data: Mapping[str, tuple[complex, ...]]
    ambient_index: float = 1.0
    substrate_index: float = 1.0
    default_wavelength_nm: float = 1310.0
    source: str = ""
    digest: str = ""

    def at(self, lambda_nm: float | None = None) -> MaterialsTable:
        lam = self.default_wavelength_nm if lambda_nm is None else float(lambda_nm)
        grid = np.asarray(self.wavelengths_nm)

        def interp(vals: Sequence[complex]) -> complex:
            v = np.asarray(vals)
            return complex(np.interp(lam, grid, v.real), np.interp(lam, grid, v.imag))

        entries = {m: interp(self.data[m]) for m in PASSIVE_MATERIALS}
        return MaterialsTable(
            entries,
            interp(self.data["GST_amorphous"]),
            interp(self.data["GST_crystalline"]),
            lam,
            self.ambient_index,
            self.substrate_index,
            self.source,
        )

    def tables(self, grid_nm: Sequence[float]) -> list[MaterialsTable]:
        return [self.at(lam) for lam in grid_nm]


def default_materials_path() -> Path:
    return Path(str(resources.files("ogemm") / "data" / "materials.yaml"))


def load_database(path: str | Path | None = None) -> MaterialsDatabase:
    """Read a materials config file (YAML) into a :class:`MaterialsDatabase`."""
    path = Path(path) if path is not None else default_materials_path()
    raw_bytes = path.read_bytes()
    try:
        raw = yaml.safe_load(raw_bytes)
    except yaml.YAMLError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict) or "wavelengths" not in raw:
        raise ParseError(f"{path}: expected a mapping with a 'wavelengths' section")
    by_lambda = raw["wavelengths"]
    grid = sorted(float(k) for k in by_lambda)
    if not grid:
        raise ParseError(f"{path}: no wavelengths listed")
    data: dict[str, list[complex]] = {m: [] for m in _REQUIRED}
    for lam in grid:
        key = next(k for k in by_lambda if float(k) == lam)
        row = by_lambda[key] or {}
        for name in _REQUIRED:
            if name not in row:
                raise ParseError(f"{path}: wavelength {lam:g} nm lacks {name}")
            try:
                n, k = (float(x) for x in row[name])
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{path}: {name} at {lam:g} nm must be [n, k]") from exc
            data[name].append(complex(n, k))
    return MaterialsDatabase(
        tuple(grid),
        {k: tuple(v) for k, v in data.items()},
        float(raw.get("ambient_index", 1.0)),
        float(raw.get("substrate_index", 1.0)),
        float(raw.get("default_wavelength_nm", grid[0])),
        source=str(path),
        digest=hashlib.sha256(raw_bytes).hexdigest(),
    )


def load_materials(path: str | Path | None = None, lambda_nm: float | None = None) -> MaterialsTable:
    """Load the table at ``lambda_nm`` (default: the file's operating wavelength)."""
    return load_database(path).at(lambda_nm)
