"""Searchable device space: genome encoding, step actions, transmittance levels.

A genome is 10 numbers. The active ITO/GST/ITO block sits at layer positions
(p, p+1, p+2); three passive layers fill the remaining positions in order.

    dim  field            range      step
    0    block start p    0..3       1
    1    ITO top (nm)     5..50      5
    2    GST (nm)         5..50      5
    3    ITO bottom (nm)  5..50      5
    4,6,8  passive material  0..4    1     (Si3N4, Al, SiO2, Au, ITO)
    5,7,9  passive thickness 5..50   5
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .errors import DomainError, ParseError
from .materials import GST, ITO, LAYER_MATERIALS, MaterialsTable, gst_indices
from .tmm import DEVICE_LAYERS, THICKNESS_MAX_NM, THICKNESS_MIN_NM, Layer, LayerStack, transfer

N_DIMS = 10
N_ACTIONS = 2 * N_DIMS
N_LEVELS = 30
THICKNESS_STEP_NM = 5.0

LOWER = np.array([0, 5, 5, 5, 0, 5, 0, 5, 0, 5], dtype=float)
UPPER = np.array([3, 50, 50, 50, 4, 50, 4, 50, 4, 50], dtype=float)
INTEGER_DIMS = (0, 4, 6, 8)
FIELD_NAMES = ("gst_block_start", "ito_top_nm", "gst_nm", "ito_bottom_nm",
               "passive0_material", "passive0_nm", "passive1_material", "passive1_nm",
               "passive2_material", "passive2_nm")


def step_sizes(thickness_step: float = THICKNESS_STEP_NM) -> np.ndarray:
    steps = np.full(N_DIMS, float(thickness_step))
    steps[list(INTEGER_DIMS)] = 1.0
    return steps


@dataclass(frozen=True)
class DeviceGenome:
    gst_block_start: int
    ito_top_nm: float
    gst_nm: float
    ito_bottom_nm: float
    passive: tuple[tuple[int, float], tuple[int, float], tuple[int, float]]

    def __post_init__(self):
        object.__setattr__(self, "passive", tuple((int(m), float(t)) for m, t in self.passive))
        self.check()

    def check(self) -> None:
        if len(self.passive) != 3:
            raise DomainError("a genome has exactly three passive layers")
        x = self.to_vector()
        if np.any(x < LOWER) or np.any(x > UPPER):
            bad = [FIELD_NAMES[i] for i in np.flatnonzero((x < LOWER) | (x > UPPER))]
            raise DomainError(f"genome field(s) out of range: {', '.join(bad)}")
        for i in INTEGER_DIMS:
            if x[i] != int(x[i]):
                raise DomainError(f"{FIELD_NAMES[i]} must be an integer")

    def to_vector(self) -> np.ndarray:
        (m0, t0), (m1, t1), (m2, t2) = self.passive
        return np.array([self.gst_block_start, self.ito_top_nm, self.gst_nm, self.ito_bottom_nm,
                         m0, t0, m1, t1, m2, t2], dtype=float)

    @classmethod
    def from_vector(cls, x: Sequence[float]) -> DeviceGenome:
        x = np.asarray(x, dtype=float)
        if x.shape != (N_DIMS,):
            raise DomainError(f"genome vectors have {N_DIMS} entries")
        if np.any(x[list(INTEGER_DIMS)] != np.round(x[list(INTEGER_DIMS)])):
            raise DomainError("integer genome dimensions must hold integers")
        return cls(int(x[0]), float(x[1]), float(x[2]), float(x[3]),
                   ((int(x[4]), float(x[5])), (int(x[6]), float(x[7])), (int(x[8]), float(x[9]))))

    def normalized(self) -> np.ndarray:
        """Per-dimension scaling into the unit box."""
        return (self.to_vector() - LOWER) / (UPPER - LOWER)

    def key(self) -> tuple[float, ...]:
        return tuple(self.to_vector().tolist())

    @property
    def total_thickness_nm(self) -> float:
        return self.ito_top_nm + self.gst_nm + self.ito_bottom_nm + sum(t for _, t in self.passive)

    def to_dict(self) -> dict:
        return {name: (int(v) if i in INTEGER_DIMS else float(v))
                for i, (name, v) in enumerate(zip(FIELD_NAMES, self.to_vector()))}

    @classmethod
    def from_dict(cls, d: dict) -> DeviceGenome:
        try:
            return cls.from_vector([d[name] for name in FIELD_NAMES])
        except KeyError as exc:
            raise ParseError(f"device record lacks field {exc.args[0]!r}") from None


def from_unit_vector(u: Sequence[float], round_thickness: bool = True) -> DeviceGenome:
    """Nearest legal genome to a point of the unit box.

    Integer dimensions are rounded; thicknesses are rounded to whole
    nanometres when ``round_thickness`` is set. Everything is clipped to bounds.
    """
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    x = LOWER + u * (UPPER - LOWER)
    ints = list(INTEGER_DIMS)
    x[ints] = np.round(x[ints])
    if round_thickness:
        thick = [i for i in range(N_DIMS) if i not in INTEGER_DIMS]
        x[thick] = np.round(x[thick])
    return DeviceGenome.from_vector(np.clip(x, LOWER, UPPER))


def decode(genome: DeviceGenome, gst_state: float = 0.0) -> LayerStack:
    """Six-layer stack described by ``genome`` with the GST layer at ``gst_state``."""
    p = genome.gst_block_start
    block = [Layer(ITO, genome.ito_top_nm), Layer(GST, genome.gst_nm, gst_state),
             Layer(ITO, genome.ito_bottom_nm)]
    passives = iter(Layer(m, t) for m, t in genome.passive)
    layers = [block[pos - p] if p <= pos < p + 3 else next(passives) for pos in range(DEVICE_LAYERS)]
    return LayerStack(tuple(layers))


def action_table(thickness_step: float = THICKNESS_STEP_NM) -> list[tuple[int, int, float]]:
    """All actions as (dimension, sign, step). Action 2d is +step on d, 2d+1 is -step."""
    steps = step_sizes(thickness_step)
    return [(a // 2, 1 if a % 2 == 0 else -1, steps[a // 2]) for a in range(N_ACTIONS)]


def apply_action(genome: DeviceGenome, action: int,
                 thickness_step: float = THICKNESS_STEP_NM) -> DeviceGenome:
    """Move one dimension by its step, clamped to bounds."""
    if not (isinstance(action, (int, np.integer)) and 0 <= action < N_ACTIONS):
        raise DomainError(f"action must be an integer in 0..{N_ACTIONS - 1}, got {action!r}")
    d, sign = int(action) // 2, 1 - 2 * (int(action) % 2)
    x = genome.to_vector()
    x[d] = np.clip(x[d] + sign * step_sizes(thickness_step)[d], LOWER[d], UPPER[d])
    return DeviceGenome.from_vector(x)


def random_genome(seed: int | np.random.Generator | None = None) -> DeviceGenome:
    """Uniform draw over the legal genomes (whole-nanometre thicknesses)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = rng.integers(LOWER.astype(int), UPPER.astype(int), endpoint=True)
    return DeviceGenome.from_vector(x.astype(float))


@dataclass(frozen=True)
class TransmittanceTable:
    """Transmittance of a device at its 30 programmable GST states."""

    levels: np.ndarray
    states: np.ndarray
    total_thickness_nm: float = float("nan")

    @property
    def t_max(self) -> float:
        return float(np.max(self.levels))

    @property
    def t_min(self) -> float:
        return float(np.min(self.levels))

    @property
    def t_diff(self) -> float:
        return self.t_max - self.t_min

    @property
    def max_gap(self) -> float:
        """Largest spacing between adjacent (sorted) levels."""
        srt = np.sort(self.levels)
        return float(np.max(np.diff(srt))) if srt.size > 1 else 0.0

    def realize(self, target: np.ndarray) -> np.ndarray:
        """Nearest available level to each target transmittance."""
        srt = np.sort(self.levels)
        target = np.asarray(target, dtype=float)
        hi = np.clip(np.searchsorted(srt, target), 1, srt.size - 1)
        lo_val, hi_val = srt[hi - 1], srt[hi]
        return np.where(target - lo_val <= hi_val - target, lo_val, hi_val)


@dataclass(frozen=True)
class ContinuousLevels:
    """Test hook: an idealised device realising every transmittance in [t_min, t_max]."""

    t_min: float
    t_max: float
    total_thickness_nm: float = float("nan")

    @property
    def t_diff(self) -> float:
        return self.t_max - self.t_min

    @property
    def max_gap(self) -> float:
        return 0.0

    @property
    def levels(self) -> np.ndarray:
        return np.linspace(self.t_min, self.t_max, 1001)

    def realize(self, target: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(target, dtype=float), self.t_min, self.t_max)


def crystalline_states(n_levels: int = N_LEVELS) -> np.ndarray:
    return np.arange(n_levels) / (n_levels - 1)


def transmittance_table(genome: DeviceGenome, table: MaterialsTable,
                        n_levels: int = N_LEVELS) -> TransmittanceTable:
    states = crystalline_states(n_levels)
    stack = decode(genome)
    base = np.array([0j if l.material == GST else table.index_of(l.material) for l in stack], dtype=complex)
    idx = np.tile(base, (n_levels, 1))
    g = [i for i, l in enumerate(stack) if l.material == GST][0]
    idx[:, g] = gst_indices(table, states)
    thick = np.array([l.thickness_nm for l in stack])
    T, _ = transfer(idx, thick, table.lambda_nm, table.ambient_index, table.substrate_index)
    return TransmittanceTable(np.asarray(T, dtype=float), states, genome.total_thickness_nm)


def describe(genome: DeviceGenome, table: MaterialsTable | None = None) -> dict:
    """Structured record of a device: fields, layers and (optionally) metrics."""
    rec = {"genome": genome.to_dict(),
           "layers": [{"material": l.name, "thickness_nm": l.thickness_nm} for l in decode(genome)]}
    if table is not None:
        tt = transmittance_table(genome, table)
        rec["metrics"] = {"t_max": tt.t_max, "t_min": tt.t_min, "t_diff": tt.t_diff,
                          "total_thickness_nm": tt.total_thickness_nm}
    return rec


def save_device(genome: DeviceGenome, path: str | Path, table: MaterialsTable | None = None) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(describe(genome, table), sort_keys=False))
    return path


def load_device(path: str | Path) -> DeviceGenome:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: not a device record")
    return DeviceGenome.from_dict(raw.get("genome", raw))


def layer_names(genome: DeviceGenome) -> list[str]:
    return [LAYER_MATERIALS[l.material] for l in decode(genome)]
