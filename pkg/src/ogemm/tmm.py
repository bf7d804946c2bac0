"""Normal-incidence transfer-matrix method for coherent thin-film stacks.

Uses the characteristic-matrix form: each layer j contributes

    M_j = [[cos d_j, i sin d_j / N_j], [i N_j sin d_j, cos d_j]],   d_j = 2 pi N_j t_j / lambda

with N_j = n - ik (the sign convention under which k > 0 attenuates).
Transmittance is the intensity (Poynting-flux) ratio, so it includes the
Re(n_substrate) / n_ambient impedance factor.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError
from .materials import GST, LAYER_MATERIALS, MaterialsTable, gst_index

THICKNESS_MIN_NM = 5.0
THICKNESS_MAX_NM = 50.0
DEVICE_LAYERS = 6


@dataclass(frozen=True)
class Layer:
    material: int
    thickness_nm: float
    gst_state: float | None = None

    @property
    def name(self) -> str:
        return LAYER_MATERIALS[self.material]


@dataclass(frozen=True)
class LayerStack:
    """Ordered layers, first entry facing the ambient (incident) medium."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    @property
    def total_thickness_nm(self) -> float:
        return float(sum(l.thickness_nm for l in self.layers))

    def reversed(self) -> LayerStack:
        return LayerStack(tuple(reversed(self.layers)))

    def with_gst_state(self, s: float) -> LayerStack:
        return LayerStack(tuple(
            Layer(l.material, l.thickness_nm, s) if l.material == GST else l for l in self.layers
        ))

    def check(self, device: bool = False) -> None:
        """Raise :class:`DomainError` unless the stack satisfies its invariants.

        With ``device=True`` the stricter device rules apply: six layers, every
        thickness in [5, 50] nm.
        """
        if device and len(self.layers) != DEVICE_LAYERS:
            raise DomainError(f"device stacks have {DEVICE_LAYERS} layers, got {len(self.layers)}")
        for i, layer in enumerate(self.layers):
            if not 0 <= layer.material <= GST:
                raise DomainError(f"layer {i}: material index {layer.material} outside 0..5")
            if not layer.thickness_nm > 0:
                raise DomainError(f"layer {i}: thickness must be positive, got {layer.thickness_nm}")
            if device and not THICKNESS_MIN_NM <= layer.thickness_nm <= THICKNESS_MAX_NM:
                raise DomainError(f"layer {i}: thickness {layer.thickness_nm} nm outside [5, 50]")
            if layer.material == GST:
                if layer.gst_state is None:
                    raise DomainError(f"layer {i}: GST layer without a crystalline fraction")
                if not 0 <= layer.gst_state <= 1:
                    raise DomainError(f"layer {i}: crystalline fraction {layer.gst_state} outside [0, 1]")
            elif layer.gst_state is not None:
                raise DomainError(f"layer {i}: only GST layers carry a crystalline fraction")


def stack_indices(stack: LayerStack, table: MaterialsTable) -> np.ndarray:
    return np.array([
        gst_index(table, l.gst_state) if l.material == GST else table.index_of(l.material)
        for l in stack.layers
    ], dtype=complex)


def transfer(indices, thicknesses_nm, lambda_nm: float, n_ambient: float = 1.0,
             n_substrate: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Transmittance and reflectance of (a batch of) stacks.

    ``indices`` and ``thicknesses_nm`` share a shape ``(..., L)``; the result
    arrays have shape ``(...)``. L may be zero.
    """
    idx = np.asarray(indices, dtype=complex)
    d = np.asarray(thicknesses_nm, dtype=float)
    idx, d = np.broadcast_arrays(idx, d)
    if np.any(d <= 0):
        raise DomainError("layer thicknesses must be positive")
    if lambda_nm <= 0:
        raise DomainError("wavelength must be positive")
    batch = idx.shape[:-1]
    m11 = np.ones(batch, dtype=complex)
    m12 = np.zeros(batch, dtype=complex)
    m21 = np.zeros(batch, dtype=complex)
    m22 = np.ones(batch, dtype=complex)
    for j in range(idx.shape[-1]):
        n = np.conj(idx[..., j])
        delta = 2.0 * np.pi * n * d[..., j] / lambda_nm
        c, s = np.cos(delta), np.sin(delta)
        a12, a21 = 1j * s / n, 1j * n * s
        m11, m12, m21, m22 = (m11 * c + m12 * a21, m11 * a12 + m12 * c,
                              m21 * c + m22 * a21, m21 * a12 + m22 * c)
    eta0, etas = float(n_ambient), float(n_substrate)
    b = m11 + m12 * etas
    cc = m21 + m22 * etas
    denom = eta0 * b + cc
    r = (eta0 * b - cc) / denom
    T = 4.0 * eta0 * etas / np.abs(denom) ** 2
    R = np.abs(r) ** 2
    return T, R


def tmm_transmittance(stack: LayerStack, table: MaterialsTable) -> tuple[float, float]:
    """(T, R) of ``stack`` at the table's wavelength, normal incidence."""
    stack.check()
    if not stack.layers:
        T, R = transfer(np.zeros(0, complex), np.zeros(0), table.lambda_nm,
                        table.ambient_index, table.substrate_index)
        return float(T), float(R)
    T, R = transfer(stack_indices(stack, table), [l.thickness_nm for l in stack.layers],
                    table.lambda_nm, table.ambient_index, table.substrate_index)
    return float(T), float(R)


def tmm_spectrum(stack: LayerStack, tables: Sequence[MaterialsTable]) -> list[tuple[float, float, float]]:
    """One (wavelength_nm, T, R) row per table, tables ordered by wavelength."""
    if len(tables) == 0:
        raise DomainError("empty wavelength grid")
    lams = [t.lambda_nm for t in tables]
    if any(b <= a for a, b in zip(lams, lams[1:])):
        raise DomainError("wavelength grid must be strictly increasing")
    return [(t.lambda_nm, *tmm_transmittance(stack, t)) for t in tables]


def write_spectrum_csv(rows: Iterable[tuple[float, float, float]], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wavelength_nm", "T", "R"])
        for lam, T, R in rows:
            w.writerow([f"{lam:.6g}", f"{T:.12g}", f"{R:.12g}"])
    return path
