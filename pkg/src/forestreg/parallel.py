"""Process-wide worker count.

Every parallel section produces results that do not depend on this value;
it only bounds how many threads are used.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

_threads = 1

try:
    import numba

    # skip the TBB layer: older system TBB builds only produce a warning
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
except ImportError:  # pragma: no cover
    numba = None


def set_threads(n: int) -> None:
    global _threads
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _threads = int(n)
    if numba is not None:
        numba.set_num_threads(min(_threads, numba.config.NUMBA_NUM_THREADS))


def get_threads() -> int:
    return _threads


def ordered_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """``list(map(fn, items))``, spread over the configured threads, order preserved."""
    items = list(items)
    if _threads == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=_threads) as pool:
        return list(pool.map(fn, items))


def default_threads() -> int:
    return os.cpu_count() or 1
