"""Per-iteration optimisation records and their accumulated averages."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METRICS = ("reward", "t_max", "t_diff", "thickness")
TRACE_HEADER = ("iteration", "reward_avg", "tmax_avg", "tdiff_avg", "thickness_avg")
BAND_HEADER = ("iteration",) + tuple(f"{m}_{s}" for m in METRICS for s in ("mean", "min", "max"))


def running_mean(x: np.ndarray) -> np.ndarray:
    """Mean of the first n entries along the last axis, for every n."""
    x = np.asarray(x, dtype=float)
    return np.cumsum(x, axis=-1) / np.arange(1, x.shape[-1] + 1)


@dataclass
class OptimizationTrace:
    """Records of one or more runs, arrays shaped (runs, iterations).

    Column 0 is the starting device of each run.
    """

    reward: np.ndarray
    t_max: np.ndarray
    t_diff: np.ndarray
    thickness: np.ndarray
    genomes: list = field(default_factory=list, repr=False)
    label: str = ""

    @classmethod
    def from_records(cls, records: list[list[dict]], label: str = "") -> OptimizationTrace:
        """Build from ``records[run][iteration]`` dicts with the four metrics (+ genome)."""
        if not records or not records[0]:
            raise ValueError("no records")
        arrays = {m: np.array([[r[m] for r in run] for run in records], dtype=float) for m in METRICS}
        genomes = [[r.get("genome") for r in run] for run in records]
        return cls(**arrays, genomes=genomes, label=label)

    @property
    def n_runs(self) -> int:
        return self.reward.shape[0]

    @property
    def n_iters(self) -> int:
        return self.reward.shape[1]

    def metric(self, name: str) -> np.ndarray:
        if name not in METRICS:
            raise KeyError(name)
        return getattr(self, name)

    def accumulated(self, name: str) -> np.ndarray:
        return running_mean(self.metric(name))

    def mean_curve(self, name: str) -> np.ndarray:
        return self.accumulated(name).mean(axis=0)

    def band(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        acc = self.accumulated(name)
        return acc.min(axis=0), acc.max(axis=0)

    def initial(self, name: str = "reward") -> float:
        return float(self.mean_curve(name)[0])

    def final(self, name: str = "reward") -> float:
        return float(self.mean_curve(name)[-1])

    def best(self) -> tuple[float, object]:
        i, j = np.unravel_index(np.argmax(self.reward), self.reward.shape)
        g = self.genomes[i][j] if self.genomes else None
        return float(self.reward[i, j]), g

    def concat(self, other: OptimizationTrace, label: str = "") -> OptimizationTrace:
        """Append ``other``'s iterations run by run; run counts are matched by averaging."""
        def widen(a, n):
            return a if a.shape[0] == n else np.repeat(a.mean(axis=0, keepdims=True), n, axis=0)
        n = max(self.n_runs, other.n_runs)
        parts = {m: np.concatenate([widen(self.metric(m), n), widen(other.metric(m), n)], axis=1)
                 for m in METRICS}
        return OptimizationTrace(**parts, label=label or self.label)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        curves = [self.mean_curve(m) for m in METRICS]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            for i in range(self.n_iters):
                w.writerow([i] + [repr(float(c[i])) for c in curves])
        return path

    def write_bands_csv(self, path: str | Path) -> Path:
        path = Path(path)
        cols = []
        for m in METRICS:
            lo, hi = self.band(m)
            cols += [self.mean_curve(m), lo, hi]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(BAND_HEADER)
            for i in range(self.n_iters):
                w.writerow([i] + [repr(float(c[i])) for c in cols])
        return path


def read_trace_csv(path: str | Path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [list(map(float, r)) for r in reader if r]
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return {h: data[:, i] for i, h in enumerate(header)}
