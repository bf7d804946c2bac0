"""Device reward: accuracy of the emulated GEMM on random matrix pairs."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .device import DeviceGenome, transmittance_table
from .emulator import EmulatorConfig, exact_gemm, gemm_optical
from .materials import MaterialsTable
from .rng import stream, thread_count

REWARD_FLOOR = -10.0
DEGENERATE_TDIFF = 1e-6
HIST_BINS = 50
# Pairs per random stream. Fixed so that splitting blocks across threads
# never changes which numbers a pair sees.
BLOCK_PAIRS = 500


@dataclass
class RewardReport:
    n_pairs: int
    errors: np.ndarray
    std_error: float
    reward: float
    hist_centers: np.ndarray = field(repr=False)
    hist_counts: np.ndarray = field(repr=False)
    degenerate: bool = False

    def summary(self) -> dict:
        return {"n_pairs": self.n_pairs, "std_error": self.std_error, "reward": self.reward,
                "mean_error": float(np.mean(self.errors)) if self.errors.size else float("nan"),
                "degenerate": self.degenerate}

    def write_histogram(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_center", "count"])
            for c, n in zip(self.hist_centers, self.hist_counts):
                w.writerow([f"{c:.9g}", int(n)])
        return path


def reward_from_errors(errors) -> RewardReport:
    """Reward = 1 - 10 * std(errors) (sample standard deviation)."""
    errors = np.asarray(errors, dtype=float)
    std = float(np.std(errors, ddof=1)) if errors.size > 1 else 0.0
    counts, edges = np.histogram(errors, bins=HIST_BINS)
    return RewardReport(errors.size, errors, std, 1.0 - 10.0 * std, 0.5 * (edges[1:] + edges[:-1]), counts)


def floor_report(n_pairs: int, floor: float = REWARD_FLOOR) -> RewardReport:
    return RewardReport(n_pairs, np.full(n_pairs, np.nan), float("inf"), floor,
                        np.zeros(HIST_BINS), np.zeros(HIST_BINS, dtype=int), degenerate=True)


def benchmark_errors(tt, cfg: EmulatorConfig, n_pairs: int = 10000, mat_dim: int = 4,
                     threads: int | None = None) -> np.ndarray:
    """E_i = emulated[0, 0] - exact[0, 0] for ``n_pairs`` random pairs in [-1, 1]."""

    def block(b: int) -> np.ndarray:
        count = min(BLOCK_PAIRS, n_pairs - b * BLOCK_PAIRS)
        rng = stream(cfg.rng_seed, 1, b)
        A = rng.uniform(-1.0, 1.0, (count, mat_dim, mat_dim))
        B = rng.uniform(-1.0, 1.0, (count, mat_dim, mat_dim))
        est = gemm_optical(A, B, tt, cfg, rng)
        return est[:, 0, 0] - exact_gemm(A, B)[:, 0, 0]

    n_blocks = -(-n_pairs // BLOCK_PAIRS)
    workers = thread_count(threads)
    if workers > 1 and n_blocks > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(block, range(n_blocks)))
    else:
        parts = [block(b) for b in range(n_blocks)]
    return np.concatenate(parts) if parts else np.zeros(0)


def evaluate_table(tt, cfg: EmulatorConfig, n_pairs: int = 10000, mat_dim: int = 4,
                   floor: float = REWARD_FLOOR, threads: int | None = None) -> RewardReport:
    """Reward of a device given its transmittance levels."""
    if not tt.t_diff >= DEGENERATE_TDIFF:
        return floor_report(n_pairs, floor)
    return reward_from_errors(benchmark_errors(tt, cfg, n_pairs, mat_dim, threads))


def evaluate_reward(genome: DeviceGenome, cfg: EmulatorConfig, table: MaterialsTable,
                    n_pairs: int = 10000, mat_dim: int = 4, floor: float = REWARD_FLOOR,
                    threads: int | None = None) -> RewardReport:
    return evaluate_table(transmittance_table(genome, table), cfg, n_pairs, mat_dim, floor, threads)
