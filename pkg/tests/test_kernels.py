"""Backend equivalence: numba kernels against the numpy fallback, and the
fused head kernels against the autodiff engine."""

import numpy as np
import pytest

from muvfs import attention, kernels
from muvfs import autodiff as ad
from muvfs.autodiff import Tensor
from muvfs.kernels import get_backends
from muvfs.kernels.common import area_weights

BACKENDS = get_backends()
HAS_NUMBA = "numba" in BACKENDS


def test_area_weights_rows_sum_to_one():
    for src, dst in ((32, 16), (32, 8), (22, 16), (19, 8), (10, 10)):
        w = area_weights(src, dst)
        assert w.shape == (dst, src)
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_resize_constant_preserved():
    frames = np.full((2, 3, 32, 32), 0.37)
    out = kernels.resize_area(frames, (16, 16))
    assert np.allclose(out, 0.37, atol=1e-12)


def test_resize_integer_downscale_is_box_mean():
    rng = np.random.default_rng(0)
    frames = rng.random((1, 1, 8, 8))
    out = kernels.resize_area(frames, (4, 4))
    manual = frames.reshape(1, 1, 4, 2, 4, 2).mean(axis=(3, 5))
    assert np.allclose(out, manual, atol=1e-12)


def test_blur_preserves_constant_and_mean():
    frames = np.full((1, 3, 16, 16), 0.5)
    assert np.allclose(kernels.box_blur3(frames), 0.5, atol=1e-12)


@pytest.mark.skipif(not HAS_NUMBA, reason="numba backend unavailable")
@pytest.mark.parametrize("name", ["resize", "blur", "affine", "gray"])
def test_backend_equivalence_image_kernels(name):
    rng = np.random.default_rng(42)
    frames = rng.random((3, 3, 32, 32))
    nb, npk = BACKENDS["numba"], BACKENDS["numpy"]
    if name == "resize":
        ry = area_weights(32, 12)
        rxt = np.ascontiguousarray(area_weights(32, 12).T)
        a, b = nb.resize_area(frames, ry, rxt), npk.resize_area(frames, ry, rxt)
    elif name == "blur":
        a, b = nb.box_blur3(frames), npk.box_blur3(frames)
    elif name == "affine":
        gain = np.array([1.2, 0.8, 1.0])
        bias = np.array([-0.1, 0.05, 0.0])
        a = nb.color_affine_clip(frames, gain, bias)
        b = npk.color_affine_clip(frames, gain, bias)
    else:
        a, b = nb.grayscale(frames), npk.grayscale(frames)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-14)


@pytest.mark.skipif(not HAS_NUMBA, reason="numba backend unavailable")
def test_backend_equivalence_render():
    rng = np.random.default_rng(7)
    t, h, w = 6, 24, 24
    args = (t, h, w, np.array([0.3, 0.4, 0.5]), np.array([0.8, 0.2, 0.1]),
            5.0, 6.0, 0.4, 1.1, True, 0.6, 4.0, 2.0,
            np.array([0.2, 0.3, 0.4]), np.array([0.7, 0.6, 0.5]),
            np.array([0.0, 0.5, 0.0, 0.0, 0.5, 0.0]),
            rng.random((t, 3)), rng.normal(0, 0.03, (t, 3, h, w)))
    a = BACKENDS["numba"].render_video(*args)
    b = BACKENDS["numpy"].render_video(*args)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-14)
    assert a.min() >= 0.0 and a.max() <= 1.0


def _head_case(rng, n=4, f=3, d=8, dk=4, dv=6, way=3):
    ap = rng.standard_normal((n, f, d))
    act = rng.standard_normal((n, d))
    K = rng.standard_normal((d, dk)) * 0.3
    V = rng.standard_normal((d, dv)) * 0.3
    Q = rng.standard_normal((d, dk)) * 0.3
    W = rng.standard_normal((way, dv)) * 0.3
    b = rng.standard_normal(way) * 0.1
    labels = rng.integers(0, way, size=n).astype(np.int64)
    return ap, act, K, V, Q, W, b, labels


@pytest.mark.skipif(not HAS_NUMBA, reason="numba backend unavailable")
def test_backend_equivalence_attn_kernels():
    rng = np.random.default_rng(3)
    case = _head_case(rng)
    nb = BACKENDS["numba"].attn_grads(*case)
    npk = BACKENDS["numpy"].attn_grads(*case)
    for a, b in zip(nb, npk):
        assert np.allclose(a, b, rtol=1e-10, atol=1e-12)


@pytest.mark.skipif(not HAS_NUMBA, reason="numba backend unavailable")
def test_backend_equivalence_finetune():
    rng = np.random.default_rng(4)
    ap, act, K, V, Q, W, b, labels = _head_case(rng)
    sets = {}
    for name, impl in BACKENDS.items():
        args = [x.copy() for x in (K, V, Q, W, b)]
        impl.attn_finetune(ap, act, *args, labels, 0.5, 20)
        sets[name] = args
    for a, b2 in zip(sets["numba"], sets["numpy"]):
        assert np.allclose(a, b2, rtol=1e-9, atol=1e-11)


def test_attn_grads_match_engine():
    """Fused kernel gradients equal the autodiff engine's."""
    rng = np.random.default_rng(11)
    ap, act, K, V, Q, W, b, labels = _head_case(rng)
    loss_k, gK, gV, gQ, gW, gb = kernels.attn_grads(ap, act, K, V, Q, W, b, labels)

    tensors = {"key_map": Tensor(K, requires_grad=True),
               "value_map": Tensor(V, requires_grad=True),
               "query_map": Tensor(Q, requires_grad=True),
               "classifier_w": Tensor(W, requires_grad=True),
               "classifier_b": Tensor(b, requires_grad=True)}
    logits = attention.batched_logits(Tensor(ap), Tensor(act), tensors, K.shape[1])
    loss = ad.cross_entropy_with_logits(logits, labels)
    names = ["key_map", "value_map", "query_map", "classifier_w", "classifier_b"]
    engine = ad.grad(loss, [tensors[n] for n in names])
    assert abs(loss_k - loss.item()) < 1e-12
    for kernel_g, engine_g in zip((gK, gV, gQ, gW, gb), engine):
        assert np.allclose(kernel_g, engine_g.data, rtol=1e-10, atol=1e-12)


def test_linear_grads_match_engine():
    rng = np.random.default_rng(12)
    feats = rng.standard_normal((6, 5))
    W = rng.standard_normal((3, 5)) * 0.2
    b = rng.standard_normal(3) * 0.1
    labels = rng.integers(0, 3, size=6).astype(np.int64)
    loss_k, gW, gb = kernels.linear_grads(feats, W, b, labels)

    wt = Tensor(W, requires_grad=True)
    bt = Tensor(b, requires_grad=True)
    loss = ad.cross_entropy_with_logits(
        ad.add(ad.matmul(Tensor(feats), ad.transpose(wt)), bt), labels)
    eW, eb = ad.grad(loss, [wt, bt])
    assert abs(loss_k - loss.item()) < 1e-12
    assert np.allclose(gW, eW.data, rtol=1e-10, atol=1e-12)
    assert np.allclose(gb, eb.data, rtol=1e-10, atol=1e-12)


def test_finetune_drives_loss_down():
    rng = np.random.default_rng(13)
    ap, act, K, V, Q, W, b, labels = _head_case(rng, n=6, way=3)
    first, *_ = kernels.attn_grads(ap, act, K, V, Q, W, b, labels)
    last = kernels.attn_finetune(ap, act, K, V, Q, W, b, labels, 1.0, 60)
    assert last < first
