"""Worker-count configuration shared by the batch paths."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

ENV_THREADS = "NUCLEO_THREADS"


def n_threads(requested: int | None = None) -> int:
    """Explicit request, else ``NUCLEO_THREADS``, else the CPU count."""
    if requested is not None:
        return max(int(requested), 1)
    env = os.environ.get(ENV_THREADS)
    if env:
        try:
            return max(int(env), 1)
        except ValueError:
            raise ValueError(f"{ENV_THREADS} must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def ordered_map(fn, items, threads: int | None = None) -> list:
    """``[fn(x) for x in items]``, possibly on a thread pool; order is preserved."""
    items = list(items)
    workers = min(n_threads(threads), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
