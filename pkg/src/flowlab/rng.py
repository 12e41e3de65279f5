"""Counter-based random substreams.

Every stream is a Philox generator keyed by ``(master_seed, key)``, so the
numbers drawn for a path never depend on which worker produced them or in
which order. Key layout:

* ``(0, path)``: Brownian increments of a path
* ``(1, path, level)``: bridge refinement of a path
* ``(2, outer, node)``: inner Monte Carlo paths of a nested estimator
* ``(3, path)``: auxiliary draws (initial states, stationary samples)
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

PATH, BRIDGE, NESTED, AUX = 0, 1, 2, 3


def substream(master_seed: int, *key: int) -> np.random.Generator:
    if master_seed is None:
        raise ValueError("a master seed is required")
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def resolve_threads(threads=None) -> int:
    """Thread count from the argument, else ``FLOWLAB_THREADS``, else 1."""
    if threads is None:
        env = os.environ.get("FLOWLAB_THREADS")
        threads = int(env) if env else 1
    threads = int(threads)
    if threads < 1:
        raise ValueError("threads must be >= 1")
    return threads


def chunked_map(fn, M: int, chunk: int = 256, threads=None):
    """Apply ``fn(start, stop)`` over ``[0, M)`` in fixed chunks.

    Results are returned in chunk order regardless of the number of threads,
    so any reduction performed on them afterwards is reproducible.
    """
    bounds = [(i, min(i + chunk, M)) for i in range(0, M, chunk)]
    threads = resolve_threads(threads)
    if threads == 1 or len(bounds) == 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))
