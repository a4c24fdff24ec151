import numpy as np
import pytest

from muvfs import autodiff as ad
from muvfs import gradcheck, synthvid
from muvfs.autodiff import ShapeError, Tensor
from muvfs.contrastive import (ContrastiveBatch, PretrainConfig, VideoStore,
                               ViewSampler, joint_loss, matching_distribution,
                               nt_xent, nt_xent_brute_force, nt_xent_from_tensor,
                               pretrain, stream_losses, symmetric_kl)
from muvfs.streams import build_model, init_mlp

N2_EXPECTED = float(np.log(np.e + 2.0) - 1.0)  # per-anchor loss of the N=2 case


def test_single_pair_loss_is_zero():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((2, 8))
    assert nt_xent_from_tensor(z, 0.5).item() == 0.0


def test_n2_closed_form():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    loss = nt_xent_from_tensor(z, 1.0).item()
    assert abs(loss - N2_EXPECTED) < 1e-12
    assert abs(loss - 0.5514) < 1e-4


def test_matches_brute_force_enumeration():
    rng = np.random.default_rng(1)
    for n in (2, 3, 5):
        for tau in (0.1, 0.7, 1.3):
            z = rng.standard_normal((2 * n, 6))
            got = nt_xent_from_tensor(z, tau).item()
            want = nt_xent_brute_force(z, tau)
            assert abs(got - want) < 1e-9


def test_scale_invariance():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((6, 4))
    base = nt_xent_from_tensor(z, 0.3).item()
    scaled = nt_xent_from_tensor(z * 17.5, 0.3).item()
    assert abs(base - scaled) < 1e-9


def test_pair_permutation_invariance():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((8, 5))
    base = nt_xent_from_tensor(z, 0.4).item()
    # move pair 0 after pair 3 (pairs move together)
    perm = z[[2, 3, 4, 5, 6, 7, 0, 1]]
    assert abs(nt_xent_from_tensor(perm, 0.4).item() - base) < 1e-9


def test_positive_similarity_monotonicity():
    # raising the positive cosine with negatives fixed lowers the loss
    def batch(p):
        return np.array([[1.0, 0.0], [np.cos(p), np.sin(p)],
                         [0.0, 1.0], [-1.0, 0.0]])

    losses = [nt_xent_from_tensor(batch(p), 0.5).item() for p in (1.2, 0.8, 0.4, 0.1)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_zero_norm_row_rejected():
    z = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ValueError, match="zero-norm"):
        nt_xent_from_tensor(z, 0.5)


def test_batch_validation():
    with pytest.raises(ShapeError):
        ContrastiveBatch(Tensor(np.zeros((3, 2))), 0.5)
    with pytest.raises(ValueError):
        ContrastiveBatch(Tensor(np.zeros((4, 2))), 0.0)


def test_nt_xent_gradient_vs_fd():
    rng = np.random.default_rng(4)
    err = gradcheck.check_scalar_fn(lambda x: nt_xent_from_tensor(x, 0.3),
                                    rng.standard_normal((6, 4)) + 0.2)
    assert err < 1e-4


def test_stream_losses_independent():
    rng = np.random.default_rng(5)
    za, zc = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    la, lc = stream_losses(ContrastiveBatch(Tensor(za), 0.2),
                           ContrastiveBatch(Tensor(zc), 0.2))
    assert abs(la.item() - nt_xent_brute_force(za, 0.2)) < 1e-9
    assert abs(lc.item() - nt_xent_brute_force(zc, 0.2)) < 1e-9
    same = ContrastiveBatch(Tensor(za), 0.2)
    l1, l2 = stream_losses(same, ContrastiveBatch(Tensor(za), 0.2))
    assert l1.item() == l2.item()
    with pytest.raises(ShapeError):
        stream_losses(ContrastiveBatch(Tensor(za), 0.2),
                      ContrastiveBatch(Tensor(rng.standard_normal((8, 4))), 0.2))


def test_joint_loss_identity_head_equals_raw_concat():
    rng = np.random.default_rng(6)
    h_ap = np.abs(rng.standard_normal((4, 3)))
    h_act = np.abs(rng.standard_normal((4, 3)))
    from muvfs.streams import Mlp

    eye = [Tensor(np.eye(6), requires_grad=True)] * 2
    zero = [Tensor(np.zeros(6), requires_grad=True)] * 2
    head = Mlp(eye, zero)
    got = joint_loss(Tensor(h_ap), Tensor(h_act), head, 0.5).item()
    want = nt_xent_brute_force(np.concatenate([h_ap, h_act], axis=1), 0.5)
    assert abs(got - want) < 1e-9


def test_joint_loss_single_pair_zero():
    rng = np.random.default_rng(7)
    head = init_mlp(rng, [6, 4, 5])
    loss = joint_loss(Tensor(rng.standard_normal((2, 3))),
                      Tensor(rng.standard_normal((2, 3))), head, 0.5)
    assert loss.item() == 0.0


def test_symmetric_kl_closed_form():
    p = Tensor(np.array([[0.75, 0.25]]))
    q = Tensor(np.array([[0.5, 0.5]]))
    got = symmetric_kl(p, q).item()
    want = (0.75 * np.log(1.5) + 0.25 * np.log(0.5)
            + 0.5 * np.log(0.5 / 0.75) + 0.5 * np.log(2.0))
    assert abs(got - want) < 1e-12
    assert abs(got - 0.2746) < 1e-4


def test_symmetric_kl_properties():
    rng = np.random.default_rng(8)
    p = rng.random((5, 7)) + 1e-3
    p /= p.sum(axis=1, keepdims=True)
    q = rng.random((5, 7)) + 1e-3
    q /= q.sum(axis=1, keepdims=True)
    assert symmetric_kl(Tensor(p), Tensor(p)).item() == pytest.approx(0.0, abs=1e-12)
    assert symmetric_kl(Tensor(p), Tensor(q)).item() == pytest.approx(
        symmetric_kl(Tensor(q), Tensor(p)).item(), abs=1e-12)
    with pytest.raises(ShapeError):
        symmetric_kl(Tensor(p), Tensor(q[:,: 5]))


def test_matching_distribution_rows():
    rng = np.random.default_rng(9)
    z = rng.standard_normal((6, 4))
    p = matching_distribution(Tensor(z), 0.3).data
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.diag(p) == 0.0)
    assert np.all(p >= 0)


# ---------------------------------------------------------------------------
# pretraining loop


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    spec = synthvid.DatasetSpec(appearance_classes=2, motion_classes=2,
                                train_classes=3, novel_classes=1,
                                videos_per_train_class=6, videos_per_novel_class=2,
                                frames=16, height=16, width=16, seed=11)
    manifest = synthvid.generate_dataset(spec, out)
    return out, manifest


def tiny_setup(tmp_dir, manifest, seed=0, joint=False):
    store = VideoStore(tmp_dir, manifest)
    sampler = ViewSampler(
        appearance_scheme=synthvid.parse_scheme("4x1", (8, 8)),
        action_scheme=synthvid.parse_scheme("4x4", (4, 4)),
        aug=synthvid.AugmentationConfig(crop_scale_range=(0.7, 1.0)))
    rng = np.random.default_rng(seed)
    model = build_model(rng, 3 * 8 * 8, 16 * 3 * 4 * 4, hidden=32, embed_dim=8,
                        proj_hidden=16, proj_dim=16, joint_head=joint)
    return store, sampler, model


def test_pretrain_zero_epochs_keeps_params(tiny_dataset):
    out, manifest = tiny_dataset
    store, sampler, model = tiny_setup(out, manifest)
    before = {k: v.data.copy() for k, v in model.named_params().items()}
    log = pretrain(store, model, sampler, PretrainConfig(epochs=0, batch_size=8))
    assert log == []
    for k, v in model.named_params().items():
        assert v.data.tobytes() == before[k].tobytes()


def test_pretrain_deterministic(tiny_dataset):
    out, manifest = tiny_dataset
    results = []
    for _ in range(2):
        store, sampler, model = tiny_setup(out, manifest, seed=4)
        cfg = PretrainConfig(epochs=2, batch_size=8, seed=9)
        log = pretrain(store, model, sampler, cfg)
        results.append((log, {k: v.data.copy() for k, v in model.named_params().items()}))
    (log1, p1), (log2, p2) = results
    assert log1 == log2
    for k in p1:
        assert p1[k].tobytes() == p2[k].tobytes()


def test_pretrain_loss_decreases(tiny_dataset):
    out, manifest = tiny_dataset
    store, sampler, model = tiny_setup(out, manifest, seed=1)
    cfg = PretrainConfig(epochs=12, batch_size=9, peak_lr=0.05, warmup_epochs=1,
                         seed=2)
    log = pretrain(store, model, sampler, cfg)
    assert len(log) == 12
    assert log[-1]["loss_ap"] < 0.7 * log[0]["loss_ap"]
    assert log[-1]["loss_act"] < 0.7 * log[0]["loss_act"]


def test_pretrain_optional_losses_logged(tiny_dataset):
    out, manifest = tiny_dataset
    store, sampler, model = tiny_setup(out, manifest, seed=2, joint=True)
    cfg = PretrainConfig(epochs=1, batch_size=8, use_joint=True, use_skl=True, seed=3)
    log = pretrain(store, model, sampler, cfg)
    assert "loss_joint" in log[0] and "loss_skl" in log[0]
    assert log[0]["loss_skl"] >= 0.0

    store2, sampler2, model2 = tiny_setup(out, manifest, seed=2)
    log2 = pretrain(store2, model2, sampler2, PretrainConfig(epochs=1, batch_size=8, seed=3))
    assert "loss_joint" not in log2[0] and "loss_skl" not in log2[0]
