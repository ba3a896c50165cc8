"""Thread-count plumbing for per-case / per-tree parallelism.

Work units are always given pre-derived RNG substreams and results are
collected in input order, so the outputs are identical for any thread count.
Default is 1 thread (reproducibility baseline); override with --threads or
the VOXELSEG_THREADS environment variable.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_num_threads = 1


def set_num_threads(n: int) -> None:
    global _num_threads
    _num_threads = max(1, int(n))


def get_num_threads() -> int:
    return _num_threads


def threads_from_env(default: int = 1) -> int:
    val = os.environ.get("VOXELSEG_THREADS")
    if val is None:
        return default
    try:
        return max(1, int(val))
    except ValueError:
        return default


def parallel_map(fn, items, threads: int | None = None) -> list:
    """Map fn over items, preserving input order in the result list."""
    n = _num_threads if threads is None else max(1, int(threads))
    items = list(items)
    if n == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
