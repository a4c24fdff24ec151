"""Pure-numpy kernel implementations (the fallback backend)."""

from __future__ import annotations

import numpy as np

from .common import LUMA, NORM_EPS


def resize_area(frames: np.ndarray, ry: np.ndarray, rxt: np.ndarray) -> np.ndarray:
    """Area-average resize of (..., H, W) frames with precomputed weights."""
    return np.matmul(np.matmul(ry, frames), rxt)


def box_blur3(frames: np.ndarray) -> np.ndarray:
    """Separable 3-tap blur (0.25, 0.5, 0.25) with edge replication."""
    p = np.concatenate([frames[..., :, :1], frames, frames[..., :, -1:]], axis=-1)
    h = 0.25 * p[..., :, :-2] + 0.5 * p[..., :, 1:-1] + 0.25 * p[..., :, 2:]
    p = np.concatenate([h[..., :1, :], h, h[..., -1:, :]], axis=-2)
    return 0.25 * p[..., :-2, :] + 0.5 * p[..., 1:-1, :] + 0.25 * p[..., 2:, :]


def color_affine_clip(frames: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Per-channel affine shift of (..., C, H, W) frames, clamped to [0, 1]."""
    out = frames * gain[:, None, None] + bias[:, None, None]
    return np.clip(out, 0.0, 1.0)


def grayscale(frames: np.ndarray) -> np.ndarray:
    luma = np.einsum("c,tchw->thw", LUMA, frames)
    return np.repeat(luma[:, None, :, :], frames.shape[1], axis=1)


def render_video(T: int, H: int, W: int, bg: np.ndarray, fg: np.ndarray,
                 radius: float, orbit_r: float, omega: float, phase0: float,
                 use_stripes: bool, stripe_angle: float, stripe_period: float,
                 stripe_phase: float, c1: np.ndarray, c2: np.ndarray,
                 flicker_w: np.ndarray, flicker_rgb: np.ndarray,
                 noise: np.ndarray) -> np.ndarray:
    """Soft-edged disk on a flat background following a circular path."""
    aa = 1.5
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    ys = np.arange(H)[:, None]
    xs = np.arange(W)[None, :]
    out = np.empty((T, 3, H, W))
    if use_stripes:
        freq = 2.0 * np.pi / stripe_period
        s = 0.5 + 0.5 * np.sin((xs * np.cos(stripe_angle) + ys * np.sin(stripe_angle))
                               * freq + stripe_phase)
        col = c1[:, None, None] + (c2 - c1)[:, None, None] * s[None, :, :]
    else:
        col = np.broadcast_to(fg[:, None, None], (3, H, W))
    for t in range(T):
        psi = phase0 + omega * t
        sy = cy + orbit_r * np.sin(psi)
        sx = cx + orbit_r * np.cos(psi)
        d = np.sqrt((ys - sy) ** 2 + (xs - sx) ** 2)
        m = np.clip((radius + 0.5 * aa - d) / aa, 0.0, 1.0)
        pix = bg[:, None, None] + m[None, :, :] * (col - bg[:, None, None])
        w = flicker_w[t]
        if w > 0:
            pix = pix + w * (flicker_rgb[t][:, None, None] - pix)
        out[t] = pix + noise[t]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# head finetuning kernels


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def attn_forward(ap: np.ndarray, act: np.ndarray, K: np.ndarray, V: np.ndarray,
                 Q: np.ndarray, W: np.ndarray, b: np.ndarray):
    n, F, D = ap.shape
    dk = K.shape[1]
    sc = 1.0 / np.sqrt(dk)
    flat = ap.reshape(n * F, D)
    k = (flat @ K).reshape(n, F, dk)
    v = (flat @ V).reshape(n, F, V.shape[1])
    q = act @ Q
    raw = np.einsum("nfk,nk->nf", k, q) * sc
    a = _softmax_rows(raw)
    h = np.einsum("nf,nfd->nd", a, v)
    nn = np.sqrt((h * h).sum(axis=1, keepdims=True))
    u = h / np.maximum(nn, NORM_EPS)
    logits = u @ W.T + b
    return k, v, q, a, h, nn, u, logits


def attn_logits(ap, act, K, V, Q, W, b) -> np.ndarray:
    return attn_forward(ap, act, K, V, Q, W, b)[-1]


def attn_grads(ap, act, K, V, Q, W, b, labels):
    """Loss and parameter gradients of the attention head + classifier."""
    n, F, D = ap.shape
    dk = K.shape[1]
    sc = 1.0 / np.sqrt(dk)
    k, v, q, a, h, nn, u, logits = attn_forward(ap, act, K, V, Q, W, b)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = float(-(z[rows, labels] - lse[:, 0]).mean())
    p = np.exp(z - lse)
    gl = p.copy()
    gl[rows, labels] -= 1.0
    gl /= n
    gW = gl.T @ u
    gb = gl.sum(axis=0)
    gu = gl @ W
    d = np.maximum(nn, NORM_EPS)
    mask = (nn > NORM_EPS).astype(np.float64)
    proj = (h * gu).sum(axis=1, keepdims=True)
    gh = gu / d - mask * h * proj / (d * d * np.maximum(nn, 1e-300))
    ga = np.einsum("nd,nfd->nf", gh, v)
    gv = a[:, :, None] * gh[:, None, :]
    flat = ap.reshape(n * F, D)
    gV = flat.T @ gv.reshape(n * F, -1)
    gs = a * (ga - (a * ga).sum(axis=1, keepdims=True))
    gk = gs[:, :, None] * q[:, None, :] * sc
    gK = flat.T @ gk.reshape(n * F, -1)
    gq = np.einsum("nf,nfk->nk", gs, k) * sc
    gQ = act.T @ gq
    return loss, gK, gV, gQ, gW, gb


def attn_finetune(ap, act, K, V, Q, W, b, labels, lr: float, epochs: int) -> float:
    """Full-batch gradient descent on the head parameters, in place."""
    loss = 0.0
    for _ in range(epochs):
        loss, gK, gV, gQ, gW, gb = attn_grads(ap, act, K, V, Q, W, b, labels)
        K -= lr * gK
        V -= lr * gV
        Q -= lr * gQ
        W -= lr * gW
        b -= lr * gb
    return loss


def linear_logits(feats, W, b) -> np.ndarray:
    return feats @ W.T + b


def linear_grads(feats, W, b, labels):
    n = feats.shape[0]
    logits = feats @ W.T + b
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = float(-(z[rows, labels] - lse[:, 0]).mean())
    p = np.exp(z - lse)
    gl = p.copy()
    gl[rows, labels] -= 1.0
    gl /= n
    return loss, gl.T @ feats, gl.sum(axis=0)


def linear_finetune(feats, W, b, labels, lr: float, epochs: int) -> float:
    loss = 0.0
    for _ in range(epochs):
        loss, gW, gb = linear_grads(feats, W, b, labels)
        W -= lr * gW
        b -= lr * gb
    return loss
