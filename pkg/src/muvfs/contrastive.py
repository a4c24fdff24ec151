"""Temperature-scaled contrastive objectives and the two-stream pretraining loop.

Batches hold 2N projected embeddings where rows (2k, 2k+1) are the two
augmented views of video k.  Each anchor is scored against every other row
by cosine similarity over temperature; the loss is the mean negative
log-probability of matching the positive twin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import synthvid
from .autodiff import NonFiniteError, ShapeError, Tensor
from .optim import SgdMomentum, lr_at, warmup_cosine_from_epochs
from .streams import (Mlp, TwoStreamModel, encode_appearance, flatten_clip,
                      flatten_frames, project)

_NEG_INF = -1e30


class TrainingError(Exception):
    pass


@dataclass
class ContrastiveBatch:
    z: Tensor      # (2N, d), rows (2k, 2k+1) are the positive pair of video k
    tau: float

    def __post_init__(self):
        if self.z.ndim != 2 or self.z.shape[0] < 2 or self.z.shape[0] % 2:
            raise ShapeError(f"contrastive batch needs an even number >= 2 of rows, "
                             f"got shape {self.z.shape}")
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")

    @property
    def pairs(self) -> int:
        return self.z.shape[0] // 2


def nt_xent_from_tensor(z: Tensor, tau: float) -> Tensor:
    """Contrastive loss over 2N paired rows; differentiable."""
    return nt_xent(ContrastiveBatch(z if isinstance(z, Tensor) else Tensor(z), tau))


def nt_xent(batch: ContrastiveBatch) -> Tensor:
    z, tau = batch.z, batch.tau
    m = z.shape[0]
    norms = np.linalg.norm(z.data, axis=1)
    if np.any(norms == 0):
        raise ValueError("nt_xent: zero-norm embedding row; cosine similarity undefined")
    zn = ad.l2_normalize(z, axis=-1)
    sims = ad.scale(ad.matmul(zn, ad.transpose(zn)), 1.0 / tau)
    mask = np.zeros((m, m))
    np.fill_diagonal(mask, _NEG_INF)
    denom = ad.logsumexp(ad.add(sims, Tensor(mask)), axis=-1)   # (2N,) over k != i
    pos = np.zeros((m, m))
    idx = np.arange(m)
    pos[idx, idx ^ 1] = 1.0                                      # partner of row i
    matched = ad.sum(ad.mul(sims, Tensor(pos)), axis=-1)
    return ad.mean(ad.sub(denom, matched))


def nt_xent_brute_force(z: np.ndarray, tau: float) -> float:
    """Literal per-anchor enumeration; the independent oracle for nt_xent."""
    z = np.asarray(z, dtype=np.float64)
    m = z.shape[0]
    un = z / np.linalg.norm(z, axis=1, keepdims=True)
    total = 0.0
    for i in range(m):
        j = i ^ 1
        num = np.exp(un[i] @ un[j] / tau)
        den = 0.0
        for k in range(m):
            if k != i:
                den += np.exp(un[i] @ un[k] / tau)
        total += -np.log(num / den)
    return total / m


def stream_losses(batch_ap: ContrastiveBatch, batch_act: ContrastiveBatch):
    """Independent per-stream losses; no cross-stream terms."""
    if batch_ap.pairs != batch_act.pairs:
        raise ShapeError(f"stream batches cover {batch_ap.pairs} vs "
                         f"{batch_act.pairs} videos")
    return nt_xent(batch_ap), nt_xent(batch_act)


def joint_loss(h_ap: Tensor, h_act: Tensor, head: Mlp, tau: float) -> Tensor:
    """Contrastive loss over projected concatenations of the paired stream embeddings."""
    if h_ap.shape[0] != h_act.shape[0]:
        raise ShapeError(f"joint_loss: row counts {h_ap.shape[0]} vs {h_act.shape[0]}")
    z = project(ad.concat([h_ap, h_act], axis=1), head)
    return nt_xent(ContrastiveBatch(z, tau))


def matching_distribution(z: Tensor, tau: float) -> Tensor:
    """Row-stochastic matrix of match probabilities of each anchor to the others.

    Self-matches carry exactly zero probability, so each row is the softmax
    over the remaining 2N-1 candidates.
    """
    m = z.shape[0]
    norms = np.linalg.norm(z.data, axis=1)
    if np.any(norms == 0):
        raise ValueError("matching_distribution: zero-norm embedding row")
    zn = ad.l2_normalize(z, axis=-1)
    sims = ad.scale(ad.matmul(zn, ad.transpose(zn)), 1.0 / tau)
    mask = np.zeros((m, m))
    np.fill_diagonal(mask, _NEG_INF)
    return ad.softmax(ad.add(sims, Tensor(mask)), axis=-1)


def symmetric_kl(p: Tensor, q: Tensor, eps: float = 1e-12) -> Tensor:
    """Mean over rows of KL(p||q) + KL(q||p) with eps inside the logs."""
    if p.shape != q.shape:
        raise ShapeError(f"symmetric_kl: shapes {p.shape} and {q.shape} differ")
    lp = ad.log(ad.add(p, Tensor(np.full(p.shape, eps))))
    lq = ad.log(ad.add(q, Tensor(np.full(q.shape, eps))))
    diff = ad.sub(lp, lq)
    per_row = ad.add(ad.sum(ad.mul(p, diff), axis=-1),
                     ad.sum(ad.mul(q, ad.scale(diff, -1.0)), axis=-1))
    return ad.mean(per_row)


# ---------------------------------------------------------------------------
# pretraining loop


@dataclass
class PretrainConfig:
    tau: float = 0.1
    batch_size: int = 64
    epochs: int = 30
    peak_lr: float = 0.01
    final_lr: float = 0.0
    warmup_epochs: int = 2
    momentum: float = 0.9
    use_joint: bool = False
    use_skl: bool = False
    share_spatial: bool = False
    seed: int = 0


class VideoStore:
    """In-memory cache of decoded videos."""

    def __init__(self, dataset_dir, manifest: synthvid.Manifest):
        self.dataset_dir = dataset_dir
        self.manifest = manifest
        self._cache: dict[int, np.ndarray] = {}

    def video(self, video_id: int) -> np.ndarray:
        if video_id not in self._cache:
            self._cache[video_id] = synthvid.load_video(
                self.dataset_dir, self.manifest.by_id(video_id))
        return self._cache[video_id]


@dataclass
class ViewSampler:
    """Draws augmented (or deterministic) stream views from raw videos."""

    appearance_scheme: synthvid.SamplingScheme
    action_scheme: synthvid.SamplingScheme
    aug: synthvid.AugmentationConfig
    share_spatial: bool = False

    def train_views(self, video: np.ndarray, rng: np.random.Generator):
        """One augmented appearance view and one augmented action view."""
        t = video.shape[0]
        ap_idx = synthvid.sample_frame_indices(t, self.appearance_scheme, rng)
        act_idx = synthvid.sample_frame_indices(t, self.action_scheme, rng)
        hw = video.shape[-2:]
        ap_params = synthvid.draw_augment_params(self.aug, hw, rng)
        act_params = ap_params if self.share_spatial else \
            synthvid.draw_augment_params(self.aug, hw, rng)
        ap = synthvid.apply_augment_params(video[ap_idx], ap_params,
                                           self.appearance_scheme.resolution)
        act = synthvid.apply_augment_params(video[act_idx], act_params,
                                            self.action_scheme.resolution)
        return ap, act

    def eval_views(self, video: np.ndarray, rng: np.random.Generator):
        """Random temporal sampling, deterministic spatial transform."""
        t = video.shape[0]
        ap_idx = synthvid.sample_frame_indices(t, self.appearance_scheme, rng)
        act_idx = synthvid.sample_frame_indices(t, self.action_scheme, rng)
        ap = synthvid.eval_view(video[ap_idx], self.appearance_scheme.resolution)
        act = synthvid.eval_view(video[act_idx], self.action_scheme.resolution)
        return ap, act


def _encode_views(model: TwoStreamModel, ap_views, act_views):
    """Stack views and run both engine encoders once.

    Returns (h_ap mean rows (2N, D), h_act rows (2N, D)).
    """
    f = ap_views[0].shape[0]
    ap_rows = Tensor(np.concatenate([flatten_frames(v) for v in ap_views], axis=0))
    per_frame = model.appearance.forward(ap_rows)
    h_ap = ad.mean(ad.reshape(per_frame, (len(ap_views), f, -1)), axis=1)
    act_rows = Tensor(np.concatenate([flatten_clip(v) for v in act_views], axis=0))
    h_act = model.action.forward(act_rows)
    return h_ap, h_act


def pretrain(store: VideoStore, model: TwoStreamModel, sampler: ViewSampler,
             cfg: PretrainConfig):
    """Contrastive training of both streams; returns per-epoch log rows."""
    train_ids = sorted(store.manifest.split_ids(synthvid.TRAIN_SPLIT))
    if len(train_ids) < 2:
        raise TrainingError("pretraining needs at least 2 train videos")
    if cfg.use_joint and model.joint_proj is None:
        raise TrainingError("joint loss enabled but model has no joint projection head")
    batch_size = min(cfg.batch_size, len(train_ids))
    steps_per_epoch = max(1, len(train_ids) // batch_size)
    schedule = warmup_cosine_from_epochs(cfg.peak_lr, cfg.final_lr, max(1, cfg.epochs),
                                         steps_per_epoch, cfg.warmup_epochs)
    named = model.named_params()
    names = sorted(named)
    params = [named[n] for n in names]
    optimizer = SgdMomentum(params, cfg.momentum)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xB41C)))
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_ids)
        sums = {"loss_ap": 0.0, "loss_act": 0.0, "loss_joint": 0.0, "loss_skl": 0.0}
        lr = lr_at(schedule, min(step, schedule.total_steps - 1))
        for b in range(steps_per_epoch):
            ids = order[b * batch_size:(b + 1) * batch_size]
            ap_views, act_views = [], []
            for vid in ids:
                video = store.video(int(vid))
                for _ in range(2):  # two independent augmentation draws per stream
                    ap, act = sampler.train_views(video, rng)
                    ap_views.append(ap)
                    act_views.append(act)
            try:
                h_ap, h_act = _encode_views(model, ap_views, act_views)
                z_ap = project(h_ap, model.appearance_proj)
                z_act = project(h_act, model.action_proj)
                loss_ap, loss_act = stream_losses(ContrastiveBatch(z_ap, cfg.tau),
                                                  ContrastiveBatch(z_act, cfg.tau))
                total = ad.add(loss_ap, loss_act)
                loss_j = loss_s = None
                if cfg.use_joint:
                    loss_j = joint_loss(h_ap, h_act, model.joint_proj, cfg.tau)
                    total = ad.add(total, loss_j)
                if cfg.use_skl:
                    loss_s = symmetric_kl(matching_distribution(z_ap, cfg.tau),
                                          matching_distribution(z_act, cfg.tau))
                    total = ad.add(total, loss_s)
                grads = ad.grad(total, params)
            except NonFiniteError as exc:
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}: {exc}") from exc
            # the cosine tail may reach exactly final_lr=0; keep the step legal
            lr = max(lr_at(schedule, step), 1e-12)
            optimizer.step(grads, lr)
            step += 1
            sums["loss_ap"] += loss_ap.item()
            sums["loss_act"] += loss_act.item()
            if loss_j is not None:
                sums["loss_joint"] += loss_j.item()
            if loss_s is not None:
                sums["loss_skl"] += loss_s.item()
        row = {"epoch": epoch,
               "loss_ap": sums["loss_ap"] / steps_per_epoch,
               "loss_act": sums["loss_act"] / steps_per_epoch,
               "lr": lr}
        if cfg.use_joint:
            row["loss_joint"] = sums["loss_joint"] / steps_per_epoch
        if cfg.use_skl:
            row["loss_skl"] = sums["loss_skl"] / steps_per_epoch
        log.append(row)
    return log
