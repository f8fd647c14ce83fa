"""Thread-count handling. ``RVC_THREADS`` caps every internal worker pool."""

import os
from concurrent.futures import ThreadPoolExecutor


def n_threads() -> int:
    raw = os.environ.get("RVC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def ordered_map(fn, items):
    """Map ``fn`` over ``items``; results always come back in input order."""
    items = list(items)
    workers = min(n_threads(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
