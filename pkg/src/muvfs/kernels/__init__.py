"""Hot numeric kernels with a numba backend and a pure-numpy fallback.

The backend is selected once at import time from the ``MUVFS_NUMBA`` env var:
unset or "1" uses numba when importable, "0" forces the numpy fallback.
``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

from . import _numpy
from .common import area_weights

_FLAG = os.environ.get("MUVFS_NUMBA", "auto").strip().lower()

if _FLAG in ("0", "false", "no", "off"):
    _impl = _numpy
    BACKEND = "numpy"
else:
    try:
        from . import _numba as _impl  # noqa: F401

        BACKEND = "numba"
    except ImportError:
        if _FLAG in ("1", "true", "yes", "on"):
            warnings.warn("MUVFS_NUMBA requested but numba is unavailable; "
                          "falling back to numpy kernels")
        _impl = _numpy
        BACKEND = "numpy"


def get_backends() -> dict[str, object]:
    """Both implementations, for equivalence tests and benchmarks."""
    backends = {"numpy": _numpy}
    try:
        from . import _numba

        backends["numba"] = _numba
    except ImportError:
        pass
    return backends


def resize_area(frames: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Area-average resize of (N, C, H, W) frames to (N, C, H', W')."""
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    h, w = frames.shape[-2:]
    h2, w2 = out_hw
    if (h, w) == (h2, w2):
        return frames.copy()
    ry = area_weights(h, h2)
    rxt = np.ascontiguousarray(area_weights(w, w2).T)
    return _impl.resize_area(frames, ry, rxt)


def box_blur3(frames: np.ndarray) -> np.ndarray:
    return _impl.box_blur3(np.ascontiguousarray(frames, dtype=np.float64))


def color_affine_clip(frames: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return _impl.color_affine_clip(np.ascontiguousarray(frames, dtype=np.float64),
                                   np.asarray(gain, dtype=np.float64),
                                   np.asarray(bias, dtype=np.float64))


def grayscale(frames: np.ndarray) -> np.ndarray:
    return _impl.grayscale(np.ascontiguousarray(frames, dtype=np.float64))


def render_video(T, H, W, bg, fg, radius, orbit_r, omega, phase0, use_stripes,
                 stripe_angle, stripe_period, stripe_phase, c1, c2,
                 flicker_w, flicker_rgb, noise) -> np.ndarray:
    return _impl.render_video(
        int(T), int(H), int(W),
        np.asarray(bg, dtype=np.float64), np.asarray(fg, dtype=np.float64),
        float(radius), float(orbit_r), float(omega), float(phase0),
        bool(use_stripes), float(stripe_angle), float(stripe_period),
        float(stripe_phase),
        np.asarray(c1, dtype=np.float64), np.asarray(c2, dtype=np.float64),
        np.ascontiguousarray(flicker_w, dtype=np.float64),
        np.ascontiguousarray(flicker_rgb, dtype=np.float64),
        np.ascontiguousarray(noise, dtype=np.float64))


def _prep(*arrays):
    return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in arrays)


def attn_logits(ap, act, K, V, Q, W, b) -> np.ndarray:
    return _impl.attn_logits(*_prep(ap, act, K, V, Q, W, b))


def attn_grads(ap, act, K, V, Q, W, b, labels):
    return _impl.attn_grads(*_prep(ap, act, K, V, Q, W, b),
                            np.ascontiguousarray(labels, dtype=np.int64))


def attn_finetune(ap, act, K, V, Q, W, b, labels, lr: float, epochs: int) -> float:
    """In-place gradient descent on K, V, Q, W, b."""
    return _impl.attn_finetune(*_prep(ap, act), K, V, Q, W, b,
                               np.ascontiguousarray(labels, dtype=np.int64),
                               float(lr), int(epochs))


def linear_logits(feats, W, b) -> np.ndarray:
    return _impl.linear_logits(*_prep(feats, W, b))


def linear_grads(feats, W, b, labels):
    return _impl.linear_grads(*_prep(feats, W, b),
                              np.ascontiguousarray(labels, dtype=np.int64))


def linear_finetune(feats, W, b, labels, lr: float, epochs: int) -> float:
    return _impl.linear_finetune(np.ascontiguousarray(feats, dtype=np.float64), W, b,
                                 np.ascontiguousarray(labels, dtype=np.int64),
                                 float(lr), int(epochs))
