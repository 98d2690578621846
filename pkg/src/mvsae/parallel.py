"""Deterministic chunked execution, optionally across worker processes.

Work is split into chunks whose composition depends only on the inputs,
never on the worker count, so results are identical for any ``workers``.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def chunked(items: Sequence[T], size: int) -> list[list[T]]:
    size = max(1, int(size))
    return [list(items[i:i + size]) for i in range(0, len(items), size)]


def map_chunks(func: Callable[[list[T]], R], chunks: Sequence[list[T]], workers: int = 1) -> list[R]:
    """``[func(c) for c in chunks]``, in order; ``func`` must be picklable when ``workers > 1``."""
    if workers <= 1 or len(chunks) <= 1:
        return [func(c) for c in chunks]
    with ProcessPoolExecutor(max_workers=min(workers, len(chunks))) as pool:
        return list(pool.map(func, chunks))
