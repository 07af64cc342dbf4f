"""Small shared helpers."""
from __future__ import annotations

import multiprocessing


def parallel_map(fn, items, threads: int = 1) -> list:
    """Order-preserving map, optionally over a fork-based worker pool.

    ``threads=1`` (the default everywhere) runs serially in-process,
    which keeps runs bit-reproducible regardless of pool scheduling.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(processes=min(threads, len(items))) as pool:
        return pool.map(fn, items, chunksize=max(1, len(items) // (4 * threads)))
