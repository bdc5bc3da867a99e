"""Fixed-chunk work distribution.

Work is cut into chunks whose boundaries depend only on the item count and the
chunk size, never on the worker count, so results are schedule independent.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

DEFAULT_CHUNK = 4096


def chunk_bounds(n_items, chunk_size=DEFAULT_CHUNK):
    if chunk_size < 1:
        raise ValueError("chunk_size must be positive")
    starts = range(0, n_items, chunk_size)
    return [(s, min(s + chunk_size, n_items)) for s in starts]


def map_chunks(fn, n_items, workers=1, chunk_size=DEFAULT_CHUNK):
    """Apply ``fn(start, stop)`` to every chunk and return results in chunk order."""
    bounds = chunk_bounds(n_items, chunk_size)
    if workers is None or workers <= 1 or len(bounds) <= 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=int(workers)) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))


def concat_chunks(results, axis=0):
    return np.concatenate(results, axis=axis) if results else np.empty(0)
