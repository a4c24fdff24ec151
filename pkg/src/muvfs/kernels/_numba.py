"""Numba-jitted kernel implementations (the default backend)."""

from __future__ import annotations

import numpy as np
from numba import njit

from .common import NORM_EPS

_L0, _L1, _L2 = 0.299, 0.587, 0.114


@njit(cache=True)
def resize_area(frames, ry, rxt):
    n, c, h, w = frames.shape
    h2 = ry.shape[0]
    w2 = rxt.shape[1]
    out = np.empty((n, c, h2, w2))
    for i in range(n):
        for j in range(c):
            out[i, j] = np.dot(np.dot(ry, frames[i, j]), rxt)
    return out


@njit(cache=True)
def box_blur3(frames):
    n, c, h, w = frames.shape
    tmp = np.empty((n, c, h, w))
    out = np.empty((n, c, h, w))
    for i in range(n):
        for j in range(c):
            for y in range(h):
                for x in range(w):
                    xl = x - 1 if x > 0 else 0
                    xr = x + 1 if x < w - 1 else w - 1
                    tmp[i, j, y, x] = (0.25 * frames[i, j, y, xl]
                                       + 0.5 * frames[i, j, y, x]
                                       + 0.25 * frames[i, j, y, xr])
            for y in range(h):
                yu = y - 1 if y > 0 else 0
                yd = y + 1 if y < h - 1 else h - 1
                for x in range(w):
                    out[i, j, y, x] = (0.25 * tmp[i, j, yu, x]
                                       + 0.5 * tmp[i, j, y, x]
                                       + 0.25 * tmp[i, j, yd, x])
    return out


@njit(cache=True)
def color_affine_clip(frames, gain, bias):
    t, c, h, w = frames.shape
    out = np.empty((t, c, h, w))
    for i in range(t):
        for j in range(c):
            for y in range(h):
                for x in range(w):
                    v = frames[i, j, y, x] * gain[j] + bias[j]
                    if v < 0.0:
                        v = 0.0
                    elif v > 1.0:
                        v = 1.0
                    out[i, j, y, x] = v
    return out


@njit(cache=True)
def grayscale(frames):
    t, c, h, w = frames.shape
    out = np.empty((t, c, h, w))
    for i in range(t):
        for y in range(h):
            for x in range(w):
                luma = (_L0 * frames[i, 0, y, x] + _L1 * frames[i, 1, y, x]
                        + _L2 * frames[i, 2, y, x])
                for j in range(c):
                    out[i, j, y, x] = luma
    return out


@njit(cache=True)
def render_video(T, H, W, bg, fg, radius, orbit_r, omega, phase0,
                 use_stripes, stripe_angle, stripe_period, stripe_phase,
                 c1, c2, flicker_w, flicker_rgb, noise):
    aa = 1.5
    cy = (H - 1) / 2.0
    cx = (W - 1) / 2.0
    out = np.empty((T, 3, H, W))
    col = np.empty((3, H, W))
    if use_stripes:
        freq = 2.0 * np.pi / stripe_period
        ca = np.cos(stripe_angle)
        sa = np.sin(stripe_angle)
        for y in range(H):
            for x in range(W):
                s = 0.5 + 0.5 * np.sin((x * ca + y * sa) * freq + stripe_phase)
                for ch in range(3):
                    col[ch, y, x] = c1[ch] + (c2[ch] - c1[ch]) * s
    else:
        for y in range(H):
            for x in range(W):
                for ch in range(3):
                    col[ch, y, x] = fg[ch]
    for t in range(T):
        psi = phase0 + omega * t
        sy = cy + orbit_r * np.sin(psi)
        sx = cx + orbit_r * np.cos(psi)
        w_t = flicker_w[t]
        for y in range(H):
            for x in range(W):
                d = np.sqrt((y - sy) ** 2 + (x - sx) ** 2)
                m = (radius + 0.5 * aa - d) / aa
                if m < 0.0:
                    m = 0.0
                elif m > 1.0:
                    m = 1.0
                for ch in range(3):
                    v = bg[ch] + m * (col[ch, y, x] - bg[ch])
                    if w_t > 0.0:
                        v = v + w_t * (flicker_rgb[t, ch] - v)
                    v = v + noise[t, ch, y, x]
                    if v < 0.0:
                        v = 0.0
                    elif v > 1.0:
                        v = 1.0
                    out[t, ch, y, x] = v
    return out


# ---------------------------------------------------------------------------
# head finetuning kernels


@njit(cache=True)
def _attn_forward(ap, act, K, V, Q, W, b):
    n, F, D = ap.shape
    dk = K.shape[1]
    dv = V.shape[1]
    way = W.shape[0]
    sc = 1.0 / np.sqrt(dk)
    flat = ap.reshape(n * F, D)
    kf = np.dot(flat, K)
    vf = np.dot(flat, V)
    q = np.dot(act, Q)
    a = np.empty((n, F))
    for i in range(n):
        mx = -1e300
        for f in range(F):
            s = 0.0
            for j in range(dk):
                s += kf[i * F + f, j] * q[i, j]
            a[i, f] = s * sc
            if a[i, f] > mx:
                mx = a[i, f]
        tot = 0.0
        for f in range(F):
            a[i, f] = np.exp(a[i, f] - mx)
            tot += a[i, f]
        for f in range(F):
            a[i, f] /= tot
    h = np.zeros((n, dv))
    for i in range(n):
        for f in range(F):
            w_if = a[i, f]
            for j in range(dv):
                h[i, j] += w_if * vf[i * F + f, j]
    nn = np.empty(n)
    u = np.empty((n, dv))
    for i in range(n):
        s = 0.0
        for j in range(dv):
            s += h[i, j] * h[i, j]
        nn[i] = np.sqrt(s)
        d = nn[i] if nn[i] > NORM_EPS else NORM_EPS
        for j in range(dv):
            u[i, j] = h[i, j] / d
    logits = np.dot(u, W.T)
    for i in range(n):
        for j in range(way):
            logits[i, j] += b[j]
    return kf, vf, q, a, h, nn, u, logits


@njit(cache=True)
def attn_logits(ap, act, K, V, Q, W, b):
    return _attn_forward(ap, act, K, V, Q, W, b)[-1]


@njit(cache=True)
def attn_grads(ap, act, K, V, Q, W, b, labels):
    n, F, D = ap.shape
    dk = K.shape[1]
    dv = V.shape[1]
    way = W.shape[0]
    sc = 1.0 / np.sqrt(dk)
    kf, vf, q, a, h, nn, u, logits = _attn_forward(ap, act, K, V, Q, W, b)
    gl = np.empty((n, way))
    loss = 0.0
    for i in range(n):
        mx = logits[i, 0]
        for j in range(1, way):
            if logits[i, j] > mx:
                mx = logits[i, j]
        tot = 0.0
        for j in range(way):
            gl[i, j] = np.exp(logits[i, j] - mx)
            tot += gl[i, j]
        loss += -(logits[i, labels[i]] - mx - np.log(tot))
        for j in range(way):
            gl[i, j] /= tot
        gl[i, labels[i]] -= 1.0
        for j in range(way):
            gl[i, j] /= n
    loss /= n
    gW = np.dot(gl.T, u)
    gb = np.empty(way)
    for j in range(way):
        s = 0.0
        for i in range(n):
            s += gl[i, j]
        gb[j] = s
    gu = np.dot(gl, W)
    gh = np.empty((n, dv))
    for i in range(n):
        d = nn[i] if nn[i] > NORM_EPS else NORM_EPS
        proj = 0.0
        for j in range(dv):
            proj += h[i, j] * gu[i, j]
        if nn[i] > NORM_EPS:
            coef = proj / (d * d * nn[i])
        else:
            coef = 0.0
        for j in range(dv):
            gh[i, j] = gu[i, j] / d - h[i, j] * coef
    gvf = np.empty((n * F, dv))
    ga = np.empty((n, F))
    for i in range(n):
        for f in range(F):
            s = 0.0
            for j in range(dv):
                s += gh[i, j] * vf[i * F + f, j]
                gvf[i * F + f, j] = a[i, f] * gh[i, j]
            ga[i, f] = s
    flat = ap.reshape(n * F, D)
    gV = np.dot(flat.T, gvf)
    gkf = np.empty((n * F, dk))
    gq = np.zeros((n, dk))
    for i in range(n):
        dot = 0.0
        for f in range(F):
            dot += a[i, f] * ga[i, f]
        for f in range(F):
            gs = a[i, f] * (ga[i, f] - dot)
            for j in range(dk):
                gkf[i * F + f, j] = gs * q[i, j] * sc
                gq[i, j] += gs * kf[i * F + f, j] * sc
    gK = np.dot(flat.T, gkf)
    gQ = np.dot(act.T, gq)
    return loss, gK, gV, gQ, gW, gb


@njit(cache=True)
def attn_finetune(ap, act, K, V, Q, W, b, labels, lr, epochs):
    loss = 0.0
    for _ in range(epochs):
        loss, gK, gV, gQ, gW, gb = attn_grads(ap, act, K, V, Q, W, b, labels)
        K -= lr * gK
        V -= lr * gV
        Q -= lr * gQ
        W -= lr * gW
        b -= lr * gb
    return loss


@njit(cache=True)
def linear_logits(feats, W, b):
    logits = np.dot(feats, W.T)
    n, way = logits.shape
    for i in range(n):
        for j in range(way):
            logits[i, j] += b[j]
    return logits


@njit(cache=True)
def linear_grads(feats, W, b, labels):
    n = feats.shape[0]
    way = W.shape[0]
    logits = linear_logits(feats, W, b)
    gl = np.empty((n, way))
    loss = 0.0
    for i in range(n):
        mx = logits[i, 0]
        for j in range(1, way):
            if logits[i, j] > mx:
                mx = logits[i, j]
        tot = 0.0
        for j in range(way):
            gl[i, j] = np.exp(logits[i, j] - mx)
            tot += gl[i, j]
        loss += -(logits[i, labels[i]] - mx - np.log(tot))
        for j in range(way):
            gl[i, j] /= tot
        gl[i, labels[i]] -= 1.0
        for j in range(way):
            gl[i, j] /= n
    loss /= n
    gW = np.dot(gl.T, feats)
    gb = np.empty(way)
    for j in range(way):
        s = 0.0
        for i in range(n):
            s += gl[i, j]
        gb[j] = s
    return loss, gW, gb


@njit(cache=True)
def linear_finetune(feats, W, b, labels, lr, epochs):
    loss = 0.0
    for _ in range(epochs):
        loss, gW, gb = linear_grads(feats, W, b, labels)
        W -= lr * gW
        b -= lr * gb
    return loss
