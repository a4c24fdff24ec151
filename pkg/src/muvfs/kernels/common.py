"""Shared pieces of both kernel backends."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

NORM_EPS = 1e-9
LUMA = np.array([0.299, 0.587, 0.114])


@lru_cache(maxsize=256)
def area_weights(src: int, dst: int) -> np.ndarray:
    """(dst, src) row-stochastic matrix averaging source pixels over output boxes."""
    w = np.zeros((dst, src))
    ratio = src / dst
    for i in range(dst):
        start = i * ratio
        end = (i + 1) * ratio
        j0, j1 = int(np.floor(start)), int(np.ceil(end))
        for j in range(j0, min(j1, src)):
            overlap = min(end, j + 1) - max(start, j)
            if overlap > 0:
                w[i, j] = overlap / ratio
    return w
