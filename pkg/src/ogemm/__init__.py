"""Optical GEMM co-design toolkit.

Thin-film phase-change devices are simulated with a transfer-matrix model,
their 30 transmittance levels drive a shot-noise GEMM emulator, and device
genomes are optimised with deep Q-learning, Bayesian optimisation or both.
"""

from .device import DeviceGenome, TransmittanceTable, random_genome, transmittance_table
from .emulator import EmulatorConfig, ExactBackend, OpticalBackend, exact_gemm, gemm_optical
from .errors import (ConfigurationError, DegenerateDeviceError, DomainError, NumericalError, ParseError,
                     StateError, TrainingError)
from .materials import MaterialsTable, load_materials
from .reward import evaluate_reward, evaluate_table
from .tmm import Layer, LayerStack, tmm_spectrum, tmm_transmittance

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "DegenerateDeviceError", "DeviceGenome", "DomainError", "EmulatorConfig",
    "ExactBackend", "Layer", "LayerStack", "MaterialsTable", "NumericalError", "OpticalBackend",
    "ParseError", "StateError", "TrainingError", "TransmittanceTable", "evaluate_reward",
    "evaluate_table", "exact_gemm", "gemm_optical", "load_materials", "random_genome",
    "tmm_spectrum", "tmm_transmittance", "transmittance_table",
]
