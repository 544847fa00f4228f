"""Deterministic seed derivation and ordered parallel evaluation.

All randomness in the package flows from a single root seed. Sub-experiments
(data generation, weight init, shuffling, QMC) derive their own seeds by
hashing the root seed together with string labels, so any piece can be
reproduced in isolation.
"""

from concurrent.futures import ThreadPoolExecutor
from hashlib import sha256

import numpy as np


def derive_seed(root: int, *labels) -> int:
    """Derive a 63-bit sub-seed from a root seed and a label path.

    Stable across processes and platforms (unlike ``hash``).
    """
    h = sha256()
    h.update(str(int(root)).encode())
    for lab in labels:
        h.update(b"/")
        h.update(str(lab).encode())
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def rng_for(root: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *labels))


def ordered_parallel_map(fn, items, threads: int = 1) -> list:
    """Map ``fn`` over ``items``, optionally with a thread pool.

    Results are always returned in input order regardless of completion
    order, so parallel and serial runs are interchangeable.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
