"""Ordered fan-out of per-image work."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    """``[fn(x) for x in items]``, optionally across processes.

    Results come back in input order whatever the scheduling, so callers
    merge them in record order. ``fn`` must be a picklable top-level function.
    """
    items = list(items)
    if workers < 1:
        raise ValueError(f"workers must be positive, got {workers}")
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))
