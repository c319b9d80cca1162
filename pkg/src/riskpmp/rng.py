"""Counter-based Gaussian sampling.

Every variate is a pure function of (seed, path index, position within the
path's stream): path ``p`` owns the Philox stream with ``counter = p << 64``
(the counter counts 4-word blocks, so streams are disjoint as long as a path
consumes fewer than 2**66 words), and raw 64-bit words are mapped to normals
through the inverse CDF.  This makes ensembles reproducible independently of
evaluation order or batching, and lets callers generate any contiguous path
range of a larger ensemble bit-identically.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

MAX_SEED = 2**64 - 1

# Paths are converted per chunk so the inverse CDF runs on large blocks.
_CHUNK_WORDS = 1 << 21


def validate_seed(seed: int) -> int:
    if not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    seed = int(seed)
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be in [0, 2**64), got {seed}")
    return seed


def _words_to_normals(words: np.ndarray) -> np.ndarray:
    # 53-bit uniform strictly inside (0, 1), then inverse normal CDF.
    u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def path_normals(seed: int, path_index: int, count: int) -> np.ndarray:
    """Standard normals for one path, positions 0..count-1 of its stream."""
    seed = validate_seed(seed)
    if path_index < 0:
        raise ValueError("path_index must be nonnegative")
    bitgen = Philox(key=seed, counter=int(path_index) << 64)
    return _words_to_normals(bitgen.random_raw(count))


def ensemble_normals(seed: int, n_paths: int, count: int, path_offset: int = 0) -> np.ndarray:
    """Standard normals of shape (n_paths, count) for paths
    path_offset..path_offset+n_paths-1.

    Row i equals ``path_normals(seed, path_offset + i, count)`` exactly.
    """
    seed = validate_seed(seed)
    if n_paths < 0 or count < 0:
        raise ValueError("n_paths and count must be nonnegative")
    if path_offset < 0:
        raise ValueError("path_offset must be nonnegative")
    out = np.empty((n_paths, count))
    if n_paths == 0 or count == 0:
        return out
    paths_per_chunk = max(1, _CHUNK_WORDS // max(count, 1))
    for start in range(0, n_paths, paths_per_chunk):
        stop = min(start + paths_per_chunk, n_paths)
        words = np.empty(((stop - start), count), dtype=np.uint64)
        for i in range(start, stop):
            bitgen = Philox(key=seed, counter=(path_offset + i) << 64)
            words[i - start] = bitgen.random_raw(count)
        out[start:stop] = _words_to_normals(words)
    return out
