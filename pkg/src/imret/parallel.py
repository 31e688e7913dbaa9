"""Deterministic fan-out over a thread pool.

Results are collected by input index, so output is identical for any pool
width; per-item arithmetic must itself be order-free (it is: items never
share accumulators).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor


def parallel_map(fn, items, threads: int = 1) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
