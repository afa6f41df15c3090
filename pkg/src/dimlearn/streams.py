"""Counter-based normal draws addressable by (seed, state, path).

Each market state gets its own Philox key ``(seed, state_index)``; path ``j``
of that state owns a fixed block of counters. Any single path can therefore be
regenerated in isolation, and a batch of paths yields exactly the same draws
as generating them one by one. Normals come from inverse-CDF transforms of
53-bit uniforms, which keeps the stream consumption fixed per draw.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_TWO_M53 = 2.0 ** -53


def _blocks(n_draws: int) -> int:
    return -(-n_draws // 4)


def _generator(seed: int, state_index: int, counter: int) -> np.random.Philox:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, state_index & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Philox(key=key, counter=counter)


def path_normals(seed: int, state_index: int, n_draws: int,
                 path_start: int = 0, n_paths: int = 1) -> np.ndarray:
    """Standard normals of shape ``(n_paths, n_draws)`` for consecutive paths."""
    bpp = _blocks(n_draws)
    bg = _generator(seed, state_index, path_start * bpp)
    raw = bg.random_raw(n_paths * bpp * 4).reshape(n_paths, bpp * 4)[:, :n_draws]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53
    return ndtri(u)


def rows_normals(seed: int, rows, n_draws: int) -> np.ndarray:
    """First-path normals for a set of state rows (single-path labels)."""
    rows = np.asarray(rows)
    out = np.empty((len(rows), n_draws))
    for i, r in enumerate(rows):
        out[i] = path_normals(seed, int(r), n_draws)[0]
    return out
