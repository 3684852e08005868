"""Worker-count control and order-preserving chunked maps.

Work is always cut into the same fixed-size chunks, whatever the number of
workers, so threaded and serial runs produce bit-identical arrays.
"""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

CHUNK_ROWS = 256


def thread_count():
    raw = os.environ.get("DANCE_THREADS")
    if raw is None or raw.strip() == "":
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"DANCE_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ValueError(f"DANCE_THREADS must be a positive integer, got {raw!r}")
    return value


def chunked_rows(func, n_rows, chunk=CHUNK_ROWS):
    """Evaluate ``func(start, stop)`` over row blocks and vstack the results."""
    bounds = [(s, min(s + chunk, n_rows)) for s in range(0, n_rows, chunk)]
    if not bounds:
        return func(0, 0)
    workers = min(thread_count(), len(bounds))
    if workers <= 1:
        parts = [func(s, e) for s, e in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: func(*b), bounds))
    return np.concatenate(parts, axis=0)
