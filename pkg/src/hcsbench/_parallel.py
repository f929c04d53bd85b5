from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(threads: int | None) -> int:
    if not threads:
        return os.cpu_count() or 1
    return max(1, int(threads))


def pmap(fn: Callable[[T], R], items: Iterable[T], threads: int | None = 1) -> list[R]:
    """Ordered map over ``items``; results never depend on ``threads``."""
    items = list(items)
    n = resolve_threads(threads)
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
