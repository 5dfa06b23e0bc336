"""Order-preserving parallel map with seed derivation independent of worker count."""

from concurrent.futures import ProcessPoolExecutor

import numpy as np


def child_seeds(seed, n):
    """Derive ``n`` independent integer seeds from a master seed.

    The derivation only depends on ``seed`` and the position, so results do not
    change with the number of workers.
    """
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def pmap(func, items, jobs=1):
    """Map ``func`` over ``items`` and return results in input order."""
    items = list(items)
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [func(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(func, items))
