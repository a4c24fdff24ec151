import numpy as np
import pytest

from muvfs import autodiff as ad
from muvfs import gradcheck
from muvfs.autodiff import ShapeError, Tensor
from muvfs.streams import (Mlp, build_model, encode_action, encode_appearance,
                           init_mlp, load_checkpoint, model_from_checkpoint,
                           project, save_checkpoint)


def test_identical_frames_mean_equals_rows():
    rng = np.random.default_rng(0)
    enc = init_mlp(rng, [12, 8, 4])
    frame = rng.random((1, 3, 2, 2))
    frames = np.repeat(frame, 5, axis=0)
    per_frame, mean = encode_appearance(frames, enc)
    assert per_frame.shape == (5, 4)
    for row in per_frame.data:
        assert np.allclose(row, mean.data, atol=1e-12)


def test_single_frame_mean_is_embedding():
    rng = np.random.default_rng(1)
    enc = init_mlp(rng, [12, 8, 4])
    frames = rng.random((1, 3, 2, 2))
    per_frame, mean = encode_appearance(frames, enc)
    assert np.allclose(per_frame.data[0], mean.data, atol=1e-15)


def test_mean_matches_direct_row_mean():
    rng = np.random.default_rng(2)
    enc = init_mlp(rng, [27, 16, 6])
    frames = rng.random((7, 3, 3, 3))
    per_frame, mean = encode_appearance(frames, enc)
    assert np.allclose(mean.data, per_frame.data.mean(axis=0), atol=1e-12)


def test_mean_gradient_distributes_uniformly():
    rng = np.random.default_rng(3)
    enc = init_mlp(rng, [12, 8, 4])
    frames = Tensor(rng.random((4, 12)), requires_grad=True)
    _, mean = encode_appearance(frames, enc)
    loss = ad.sum(mean)
    # gradient through the mean gives each frame path weight 1/F
    direct = Tensor(frames.data, requires_grad=True)
    per = enc.forward(direct)
    loss2 = ad.sum(ad.mean(per, axis=0))
    g1 = ad.grad(loss, [frames])[0].data
    g2 = ad.grad(loss2, [direct])[0].data
    assert np.allclose(g1, g2, atol=1e-12)


def test_action_encoder_order_sensitivity():
    rng = np.random.default_rng(4)
    enc = init_mlp(rng, [24, 16, 5])
    clip = rng.random((2, 3, 2, 2))
    h1 = encode_action(clip, enc)
    h2 = encode_action(clip[::-1], enc)
    assert not np.allclose(h1.data, h2.data)
    h3 = encode_action(clip, enc)
    assert np.array_equal(h1.data, h3.data)


def test_action_zero_final_layer_keeps_bias():
    rng = np.random.default_rng(5)
    enc = init_mlp(rng, [24, 16, 5])
    enc.weights[-1].data[:] = 0.0
    enc.biases[-1].data[:] = 0.25
    h = encode_action(rng.random((2, 3, 2, 2)), enc)
    assert np.allclose(h.data, 0.25, atol=1e-15)


def test_action_wrong_width_errors():
    rng = np.random.default_rng(6)
    enc = init_mlp(rng, [24, 16, 5])
    with pytest.raises(ShapeError, match="encode_action"):
        encode_action(rng.random((3, 3, 2, 2)), enc)


def test_appearance_wrong_width_errors():
    rng = np.random.default_rng(6)
    enc = init_mlp(rng, [12, 8, 4])
    with pytest.raises(ShapeError):
        encode_appearance(rng.random((2, 3, 4, 4)), enc)


def test_projection_identity_head():
    # square identity layers with zero bias pass nonnegative inputs through
    w = [Tensor(np.eye(4), requires_grad=True), Tensor(np.eye(4), requires_grad=True)]
    b = [Tensor(np.zeros(4), requires_grad=True), Tensor(np.zeros(4), requires_grad=True)]
    head = Mlp(w, b)
    h = np.array([0.5, 1.0, 0.0, 2.0])
    assert np.array_equal(project(h, head).data, h)


def test_projection_zero_input_zero_bias():
    rng = np.random.default_rng(7)
    head = init_mlp(rng, [4, 8, 3])
    z = project(np.zeros(4), head)
    assert np.allclose(z.data, 0.0, atol=1e-15)


def test_projection_gradient_vs_fd():
    rng = np.random.default_rng(8)
    head = init_mlp(rng, [4, 6, 3])
    c = rng.standard_normal(3)

    def build(x):
        return ad.sum(ad.mul(project(ad.reshape(x, (4,)), head), Tensor(c)))

    err = gradcheck.check_scalar_fn(build, rng.standard_normal(4))
    assert err < 1e-4


def test_projection_width_mismatch():
    rng = np.random.default_rng(9)
    head = init_mlp(rng, [4, 6, 3])
    with pytest.raises(ShapeError):
        project(np.zeros(5), head)


def test_output_width_fixed():
    rng = np.random.default_rng(10)
    model = build_model(rng, appearance_in=12, action_in=24, hidden=8, embed_dim=4,
                        proj_hidden=8, proj_dim=128)
    frames = rng.random((3, 3, 2, 2))
    _, mean = encode_appearance(frames, model.appearance)
    z = project(mean, model.appearance_proj)
    assert z.shape == (128,)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    model = build_model(rng, 12, 24, hidden=8, embed_dim=4, joint_head=True)
    named = model.named_params()
    save_checkpoint(tmp_path / "ckpt", named, meta={"embed_dim": 4})
    params, meta = load_checkpoint(tmp_path / "ckpt")
    assert meta == {"embed_dim": 4}
    assert set(params) == set(named)
    for name, arr in params.items():
        assert arr.tobytes() == named[name].data.tobytes()

    model2, _ = model_from_checkpoint(tmp_path / "ckpt")
    x = rng.random((2, 12))
    assert np.array_equal(model.appearance.forward_np(x), model2.appearance.forward_np(x))
    assert model2.joint_proj is not None


def test_forward_np_matches_engine():
    rng = np.random.default_rng(12)
    enc = init_mlp(rng, [10, 7, 5])
    x = rng.standard_normal((6, 10))
    assert np.allclose(enc.forward_np(x), enc.forward(Tensor(x)).data, atol=1e-12)
