"""Small shared helpers."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def default_threads() -> int:
    env = os.environ.get("EVPOINT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def parallel_map(fn, items, threads: int | None = None) -> list:
    """Map fn over items, optionally on a thread pool.

    Results come back in input order no matter how the work is
    scheduled, so reductions over them stay deterministic.
    """
    items = list(items)
    if threads is None:
        threads = default_threads()
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
