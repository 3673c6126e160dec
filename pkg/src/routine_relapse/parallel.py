"""Order-preserving map over worker processes."""

from __future__ import annotations

import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """``list(map(fn, items))``, fanned out to up to ``threads`` processes.

    Results come back in input order, so output never depends on ``threads``.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=min(threads, len(items)), mp_context=ctx) as pool:
        return list(pool.map(fn, items))
