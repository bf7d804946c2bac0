"""Counter-based random streams.

Every stochastic consumer derives its own Philox stream from a base seed and
an integer key path (e.g. ``(seed, block_index)``), so results do not depend
on execution order or on how work is split across threads.
"""

from __future__ import annotations

import os

import numpy as np

THREADS_ENV = "OGEMM_THREADS"


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def thread_count(requested: int | None = None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1
