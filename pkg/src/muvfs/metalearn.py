"""Episodic meta-training and the few-shot testing protocol.

The meta-learned parameter vector is the adaptation head (cross-attention
projections + classifier, or a plain classifier for the ablation heads);
encoders stay frozen.  Inner adaptation is plain gradient descent on the
support cross-entropy; the outer update differentiates the summed query
losses either through the adaptation (second order) or treating adapted
parameters as detached (first order).
"""

from __future__ import annotations

import math
import multiprocessing
from dataclasses import dataclass, field

import numpy as np

from . import attention, kernels
from . import autodiff as ad
from .autodiff import NonFiniteError, ShapeError, Tensor
from .kernels import _numpy as _np_kernels
from .mining import (Embedder, Episode, HardPool, MiningConfig, TestEpisode,
                     agreement_scores, build_instance_episodes, mine_hard)
from .optim import Adam, LrSchedule, lr_at

HEAD_KINDS = ("attn", "concat", "action", "appearance")
LEARNERS = ("maml", "protonet", "protomaml", "baselinepp")


class MetaError(Exception):
    pass


@dataclass
class MetaConfig:
    alpha: float = 0.001          # inner-loop learning rate
    beta: float = 0.05            # outer-loop learning rate
    episodes_per_iter: int = 10
    iterations: int = 300
    inner_steps: int = 1
    order: str = "first"          # "first" | "second"
    anneal_floor: float = 0.1     # cosine-anneal beta down to this fraction
    fast: bool = True             # fused first-order kernels when available

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise MetaError("alpha and beta must be positive")
        if self.episodes_per_iter < 1 or self.inner_steps < 1:
            raise MetaError("episodes_per_iter and inner_steps must be >= 1")
        if self.order not in ("first", "second"):
            raise MetaError(f"unknown order {self.order!r}")


@dataclass
class TestProtocol:
    finetune_lr: float = 10.0
    finetune_epochs: int = 50
    episodes: int = 10000
    way: int = 5
    shot: int = 1


# ---------------------------------------------------------------------------
# adaptation heads


def _l2n(v: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    return v / max(np.linalg.norm(v), eps)


@dataclass
class MetaHead:
    kind: str
    tensors: dict[str, Tensor]
    way: int
    d_k: int = 0

    def copy(self) -> "MetaHead":
        return MetaHead(self.kind,
                        {k: Tensor(v.data.copy(), requires_grad=True)
                         for k, v in self.tensors.items()},
                        self.way, self.d_k)

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}


def init_head(rng: np.random.Generator, kind: str, embed_dim: int, way: int,
              d_k: int = 16, d_v: int = 64, classifier_bias: bool = True) -> MetaHead:
    if kind == "attn":
        params = attention.init_params(rng, embed_dim, d_k, d_v, way, classifier_bias)
        return MetaHead("attn", params.tensors, way, d_k)
    if kind == "concat":
        dim = 2 * embed_dim
    elif kind in ("action", "appearance"):
        dim = embed_dim
    else:
        raise MetaError(f"unknown head kind {kind!r}; known: {HEAD_KINDS}")
    tensors = {"classifier_w": Tensor(np.zeros((way, dim)), requires_grad=True),
               "classifier_b": Tensor(np.zeros(way), requires_grad=True)}
    return MetaHead(kind, tensors, way)


def head_features(kind: str, items) -> np.ndarray:
    """Fixed input features of the linear ablation heads (per-stream l2-normed)."""
    rows = []
    for item in items:
        if kind == "concat":
            rows.append(np.concatenate([_l2n(item.ap_frames.mean(axis=0)),
                                        _l2n(item.act)]))
        elif kind == "action":
            rows.append(_l2n(item.act))
        elif kind == "appearance":
            rows.append(_l2n(item.ap_frames.mean(axis=0)))
        else:
            raise MetaError(f"head {kind!r} has no fixed feature form")
    return np.stack(rows)


def head_inputs(items):
    """(n, F, D) frame embeddings and (n, D) action embeddings."""
    ap = np.stack([item.ap_frames for item in items])
    act = np.stack([item.act for item in items])
    return ap, act


def episode_logits(head_kind: str, tensors: dict[str, Tensor], d_k: int, items) -> Tensor:
    """Engine logits of a batch of embedded items under head parameters."""
    if head_kind == "attn":
        ap, act = head_inputs(items)
        return attention.batched_logits(Tensor(ap), Tensor(act), tensors, d_k)
    feats = Tensor(head_features(head_kind, items))
    w = tensors["classifier_w"]
    return ad.add(ad.matmul(feats, ad.transpose(w)), tensors["classifier_b"])


def head_embeddings(head: MetaHead, items) -> np.ndarray:
    """Unit-norm head-space embeddings used by the prototype learners."""
    if head.kind == "attn":
        ap, act = head_inputs(items)
        a = head.arrays()
        u = _np_kernels.attn_forward(ap, act, a["key_map"], a["value_map"],
                                     a["query_map"], a["classifier_w"],
                                     a["classifier_b"])[6]
        return u
    return head_features(head.kind, items)


def _labels(pairs) -> np.ndarray:
    return np.array([label for _, label in pairs], dtype=np.int64)


def _items(pairs):
    return [item for item, _ in pairs]


# ---------------------------------------------------------------------------
# MAML inner and outer loops (engine path)


def inner_adapt(head: MetaHead, support, alpha: float, steps: int,
                create_graph: bool = False) -> dict[str, Tensor]:
    """``steps`` gradient-descent updates from the head's parameters.

    Returns the adapted copies; the head itself is never mutated.  With
    ``create_graph`` the updates stay differentiable w.r.t. the originals;
    otherwise the gradients are detached, which makes later query-loss
    gradients the first-order approximation.
    """
    if not support:
        raise MetaError("inner_adapt: empty support set")
    names = head.names()
    cur = dict(head.tensors)
    items, labels = _items(support), _labels(support)
    for _ in range(steps):
        try:
            loss = ad.cross_entropy_with_logits(
                episode_logits(head.kind, cur, head.d_k, items), labels)
            grads = ad.grad(loss, [cur[n] for n in names], create_graph=create_graph)
        except NonFiniteError as exc:
            raise MetaError(f"inner_adapt: non-finite loss ({exc})") from exc
        if not create_graph:
            grads = [Tensor(g.data) for g in grads]
        cur = {n: ad.sub(cur[n], ad.scale(g, alpha)) for n, g in zip(names, grads)}
    return cur


@dataclass
class MetaLearnerState:
    head: MetaHead
    optimizer: Adam
    schedule: LrSchedule
    iteration: int = 0

    def theta_bytes(self) -> bytes:
        return b"".join(self.head.tensors[n].data.tobytes() for n in self.head.names())


def new_state(head: MetaHead, cfg: MetaConfig) -> MetaLearnerState:
    names = head.names()
    optimizer = Adam([head.tensors[n] for n in names])
    schedule = LrSchedule("cosine-annealing", cfg.beta, cfg.beta * cfg.anneal_floor,
                          max(1, cfg.iterations))
    return MetaLearnerState(head, optimizer, schedule)


def _episode_meta_grads_engine(head: MetaHead, episode: Episode, cfg: MetaConfig):
    adapted = inner_adapt(head, episode.support, cfg.alpha, cfg.inner_steps,
                          create_graph=(cfg.order == "second"))
    items, labels = _items(episode.query), _labels(episode.query)
    logits = episode_logits(head.kind, adapted, head.d_k, items)
    loss = ad.cross_entropy_with_logits(logits, labels)
    names = head.names()
    grads = ad.grad(loss, [head.tensors[n] for n in names])
    acc = float(np.mean(np.argmax(logits.data, axis=1) == labels))
    return {n: g.data for n, g in zip(names, grads)}, loss.item(), acc


def _episode_meta_grads_fast(head: MetaHead, episode: Episode, cfg: MetaConfig):
    """Fused first-order path on the numeric kernels."""
    sup_items, sup_labels = _items(episode.support), _labels(episode.support)
    q_items, q_labels = _items(episode.query), _labels(episode.query)
    arrays = {n: t.data.copy() for n, t in head.tensors.items()}
    if head.kind == "attn":
        ap, act = head_inputs(sup_items)
        for _ in range(cfg.inner_steps):
            _, gK, gV, gQ, gW, gb = kernels.attn_grads(
                ap, act, arrays["key_map"], arrays["value_map"], arrays["query_map"],
                arrays["classifier_w"], arrays["classifier_b"], sup_labels)
            for name, g in zip(("key_map", "value_map", "query_map",
                                "classifier_w", "classifier_b"),
                               (gK, gV, gQ, gW, gb)):
                arrays[name] = arrays[name] - cfg.alpha * g
        qap, qact = head_inputs(q_items)
        loss, gK, gV, gQ, gW, gb = kernels.attn_grads(
            qap, qact, arrays["key_map"], arrays["value_map"], arrays["query_map"],
            arrays["classifier_w"], arrays["classifier_b"], q_labels)
        logits = kernels.attn_logits(qap, qact, arrays["key_map"], arrays["value_map"],
                                     arrays["query_map"], arrays["classifier_w"],
                                     arrays["classifier_b"])
        grads = {"key_map": gK, "value_map": gV, "query_map": gQ,
                 "classifier_w": gW, "classifier_b": gb}
    else:
        sup_feats = head_features(head.kind, sup_items)
        for _ in range(cfg.inner_steps):
            _, gW, gb = kernels.linear_grads(sup_feats, arrays["classifier_w"],
                                             arrays["classifier_b"], sup_labels)
            arrays["classifier_w"] = arrays["classifier_w"] - cfg.alpha * gW
            arrays["classifier_b"] = arrays["classifier_b"] - cfg.alpha * gb
        q_feats = head_features(head.kind, q_items)
        loss, gW, gb = kernels.linear_grads(q_feats, arrays["classifier_w"],
                                            arrays["classifier_b"], q_labels)
        logits = kernels.linear_logits(q_feats, arrays["classifier_w"],
                                       arrays["classifier_b"])
        grads = {"classifier_w": gW, "classifier_b": gb}
    acc = float(np.mean(np.argmax(logits, axis=1) == q_labels))
    return grads, float(loss), acc


def meta_step(state: MetaLearnerState, episodes: list[Episode], cfg: MetaConfig):
    """One outer update from the summed query losses of ``episodes``."""
    if not episodes:
        raise MetaError("meta_step: empty episode list")
    names = state.head.names()
    total = {n: np.zeros_like(state.head.tensors[n].data) for n in names}
    loss_sum = acc_sum = 0.0
    use_fast = cfg.fast and cfg.order == "first"
    for episode in episodes:
        if use_fast:
            grads, loss, acc = _episode_meta_grads_fast(state.head, episode, cfg)
        else:
            grads, loss, acc = _episode_meta_grads_engine(state.head, episode, cfg)
        for n in names:
            total[n] += grads[n]
        loss_sum += loss
        acc_sum += acc
    lr = lr_at(state.schedule, min(state.iteration, state.schedule.total_steps - 1))
    state.optimizer.step([total[n] for n in names], lr)
    state.iteration += 1
    return loss_sum / len(episodes), acc_sum / len(episodes), lr


def meta_train(state: MetaLearnerState, embedder: Embedder, mining_cfg: MiningConfig,
               cfg: MetaConfig, rng: np.random.Generator, mine: bool = True,
               collect_pools: bool = False):
    """Mine a pool, build episodes, and meta-step, once per iteration."""
    from .synthvid import TRAIN_SPLIT

    train_ids = sorted(embedder.store.manifest.split_ids(TRAIN_SPLIT))
    log, pools = [], []
    for it in range(cfg.iterations):
        try:
            if mine:
                m = min(mining_cfg.batch, len(train_ids))
                ids = sorted(int(v) for v in rng.choice(train_ids, size=m, replace=False))
                s_ap, s_act = agreement_scores(ids, embedder, rng)
                pool = mine_hard(ids, s_ap, s_act, mining_cfg, rng)
            else:
                pool = HardPool(list(train_ids))
            episodes = build_instance_episodes(pool, cfg.episodes_per_iter,
                                               embedder, mining_cfg, rng)
            loss, acc, lr = meta_step(state, episodes, cfg)
        except (MetaError, NonFiniteError) as exc:
            raise MetaError(f"meta_train failed at iteration {it}: {exc}") from exc
        log.append({"iteration": it, "query_loss": loss, "query_acc": acc, "lr": lr})
        if collect_pools and mine:
            pools.append([{"video_id": v,
                           "score_ap": pool.scores_ap.get(v),
                           "score_act": pool.scores_act.get(v),
                           "selected_by": pool.selected_by.get(v)}
                          for v in pool.video_ids])
    return (log, pools) if collect_pools else log


# ---------------------------------------------------------------------------
# prototype learners


def prototypes(embeddings: np.ndarray, labels: np.ndarray, way: int) -> np.ndarray:
    out = np.zeros((way, embeddings.shape[1]))
    for c in range(way):
        rows = embeddings[labels == c]
        if rows.shape[0] == 0:
            raise MetaError(f"prototypes: class {c} has no support items")
        out[c] = rows.mean(axis=0)
    return out


def protonet_predict(support_emb: np.ndarray, support_labels: np.ndarray,
                     query_emb: np.ndarray, way: int) -> np.ndarray:
    """Nearest-prototype labels by Euclidean distance."""
    protos = prototypes(support_emb, support_labels, way)
    d2 = ((query_emb[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def protonet_loss(head: MetaHead, support, query) -> Tensor:
    """Training form: cross-entropy over softmaxed negative squared distances."""
    sup_items, sup_labels = _items(support), _labels(support)
    q_items, q_labels = _items(query), _labels(query)
    if head.kind != "attn":
        feats_s = Tensor(head_features(head.kind, sup_items))
        feats_q = Tensor(head_features(head.kind, q_items))
        raise MetaError("protonet_loss trains the attention head; "
                        "linear heads have no trainable embedding")
    ap, act = head_inputs(sup_items)
    rec_s = _attn_unit(head, ap, act)
    qap, qact = head_inputs(q_items)
    rec_q = _attn_unit(head, qap, qact)
    way = head.way
    rows = []
    for c in range(way):
        sel = np.zeros((len(sup_items), 1))
        sel[sup_labels == c] = 1.0 / max(1, int((sup_labels == c).sum()))
        rows.append(ad.matmul(ad.transpose(Tensor(sel)), rec_s))
    protos = ad.concat(rows, axis=0)                                  # (way, d_v)
    q2 = ad.sum(ad.mul(rec_q, rec_q), axis=1, keepdims=True)          # (nq, 1)
    p2 = ad.reshape(ad.sum(ad.mul(protos, protos), axis=1), (1, way))
    cross = ad.matmul(rec_q, ad.transpose(protos))
    logits = ad.scale(ad.add(ad.sub(q2, ad.scale(cross, 2.0)), p2), -1.0)
    return ad.cross_entropy_with_logits(logits, q_labels)


def _attn_unit(head: MetaHead, ap: np.ndarray, act: np.ndarray) -> Tensor:
    """l2-normalized aggregated attention embedding, engine form."""
    t = head.tensors
    n, f, d = ap.shape
    flat = ad.reshape(Tensor(ap), (n * f, d))
    keys = ad.reshape(ad.matmul(flat, t["key_map"]), (n, f, -1))
    values = ad.reshape(ad.matmul(flat, t["value_map"]), (n, f, -1))
    query = ad.matmul(Tensor(act), t["query_map"])
    raw = ad.sum(ad.mul(keys, ad.reshape(query, (n, 1, head.d_k))), axis=2)
    scores = ad.softmax(ad.scale(raw, 1.0 / np.sqrt(head.d_k)), axis=-1)
    agg = ad.sum(ad.mul(ad.reshape(scores, (n, f, 1)), values), axis=1)
    return ad.l2_normalize(agg, axis=-1)


def protomaml_init(protos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Classifier from prototypes: row_c = 2*p_c, bias_c = -||p_c||^2."""
    w = 2.0 * protos
    b = -(protos * protos).sum(axis=1)
    return w, b


# ---------------------------------------------------------------------------
# meta-testing


@dataclass
class EvalReport:
    way: int
    shot: int
    episodes: int
    mean_acc: float
    ci95: float
    learner: str
    seed: int
    config_digest: str = ""
    classifier_reinit: bool = False

    @property
    def display(self) -> str:
        return format_accuracy(self.mean_acc, self.ci95)

    def to_dict(self) -> dict:
        return {"way": self.way, "shot": self.shot, "episodes": self.episodes,
                "mean_acc": round(self.mean_acc, 6), "ci95": round(self.ci95, 6),
                "learner": self.learner, "seed": self.seed,
                "config_digest": self.config_digest,
                "classifier_reinit": self.classifier_reinit,
                "display": self.display}


def accuracy_ci(per_episode: np.ndarray) -> tuple[float, float]:
    """Mean accuracy (%) and 95% CI half-width (%) over episode accuracies."""
    per_episode = np.asarray(per_episode, dtype=np.float64)
    if per_episode.size < 2:
        raise MetaError(f"accuracy_ci needs >= 2 episodes, got {per_episode.size}")
    mean = float(per_episode.mean()) * 100.0
    s = float(per_episode.std(ddof=1))
    half = 1.96 * s / math.sqrt(per_episode.size) * 100.0
    return mean, half


def format_accuracy(mean_pct: float, half_pct: float) -> str:
    return f"{mean_pct:.2f} ± {half_pct:.2f}"


def _episode_head(head: MetaHead, way: int) -> tuple[MetaHead, bool]:
    """Copy for one episode; classifier reshaped (zero rows) on way mismatch."""
    copy = head.copy()
    if way == head.way:
        return copy, False
    dim = head.tensors["classifier_w"].shape[1]
    copy.tensors["classifier_w"] = Tensor(np.zeros((way, dim)), requires_grad=True)
    copy.tensors["classifier_b"] = Tensor(np.zeros(way), requires_grad=True)
    copy.way = way
    return copy, True


def _finetune_head(head: MetaHead, support, lr: float, epochs: int) -> MetaHead:
    """Full-batch gradient descent on the episode copy (kernels, in place)."""
    items, labels = _items(support), _labels(support)
    arrays = {n: t.data for n, t in head.tensors.items()}
    if epochs > 0:
        if head.kind == "attn":
            ap, act = head_inputs(items)
            kernels.attn_finetune(ap, act, arrays["key_map"], arrays["value_map"],
                                  arrays["query_map"], arrays["classifier_w"],
                                  arrays["classifier_b"], labels, lr, epochs)
        else:
            feats = head_features(head.kind, items)
            kernels.linear_finetune(feats, arrays["classifier_w"],
                                    arrays["classifier_b"], labels, lr, epochs)
    return head


def _head_logits_np(head: MetaHead, items) -> np.ndarray:
    a = head.arrays()
    if head.kind == "attn":
        ap, act = head_inputs(items)
        return kernels.attn_logits(ap, act, a["key_map"], a["value_map"],
                                   a["query_map"], a["classifier_w"], a["classifier_b"])
    feats = head_features(head.kind, items)
    return kernels.linear_logits(feats, a["classifier_w"], a["classifier_b"])


def baselinepp_finetune(head: MetaHead, support, query, lr: float, epochs: int,
                        scale_init: float = 10.0) -> np.ndarray:
    """Cosine-classifier finetuning; returns predicted query labels.

    The classifier weight rows start from the support prototypes in head
    space (a zero row would make the normalized-cosine gradient blow up),
    and the head projections are finetuned along with the classifier.
    """
    sup_items, sup_labels = _items(support), _labels(support)
    q_items = _items(query)
    emb = head_embeddings(head, sup_items)
    protos = prototypes(emb, sup_labels, head.way)
    w = Tensor(protos.copy(), requires_grad=True)
    scale_t = Tensor(np.array([scale_init]), requires_grad=True)
    work = head.copy()
    trainable = {f"head.{n}": work.tensors[n] for n in work.names()
                 if not n.startswith("classifier")}
    trainable["cosine_w"] = w
    trainable["cosine_scale"] = scale_t
    names = sorted(trainable)

    def logits_for(items) -> Tensor:
        if work.kind == "attn":
            ap, act = head_inputs(items)
            u = _attn_unit(work, ap, act)
        else:
            u = Tensor(head_features(work.kind, items))
        wn = ad.l2_normalize(w, axis=-1)
        cos = ad.matmul(u, ad.transpose(wn))
        return ad.mul(cos, ad.reshape(scale_t, (1, 1)))

    for _ in range(epochs):
        loss = ad.cross_entropy_with_logits(logits_for(sup_items), sup_labels)
        grads = ad.grad(loss, [trainable[n] for n in names])
        for n, g in zip(names, grads):
            trainable[n].data -= lr * g.data
    return np.argmax(logits_for(q_items).data, axis=1)


def run_episode(head: MetaHead, episode_items, protocol: TestProtocol,
                learner: str, scale_init: float = 10.0) -> tuple[float, bool]:
    """Accuracy of one embedded labeled episode. ``episode_items`` is
    (support pairs, query pairs) of (EmbeddedItem, label)."""
    support, query = episode_items
    way = max(label for _, label in support) + 1
    ep_head, reinit = _episode_head(head, way)
    q_labels = _labels(query)
    if learner == "maml":
        _finetune_head(ep_head, support, protocol.finetune_lr, protocol.finetune_epochs)
        pred = np.argmax(_head_logits_np(ep_head, _items(query)), axis=1)
    elif learner == "protonet":
        emb_s = head_embeddings(ep_head, _items(support))
        emb_q = head_embeddings(ep_head, _items(query))
        pred = protonet_predict(emb_s, _labels(support), emb_q, way)
    elif learner == "protomaml":
        emb_s = head_embeddings(ep_head, _items(support))
        w, b = protomaml_init(prototypes(emb_s, _labels(support), way))
        ep_head.tensors["classifier_w"] = Tensor(w, requires_grad=True)
        ep_head.tensors["classifier_b"] = Tensor(b, requires_grad=True)
        _finetune_head(ep_head, support, protocol.finetune_lr, protocol.finetune_epochs)
        pred = np.argmax(_head_logits_np(ep_head, _items(query)), axis=1)
    elif learner == "baselinepp":
        pred = baselinepp_finetune(ep_head, support, query, protocol.finetune_lr,
                                   protocol.finetune_epochs, scale_init)
    else:
        raise MetaError(f"unknown learner {learner!r}; known: {LEARNERS}")
    return float(np.mean(pred == q_labels)), reinit


_EVAL_CTX: dict = {}


def _eval_span(span):
    lo, hi = span
    return [_eval_one(i) for i in range(lo, hi)]


def _eval_one(index: int):
    ctx = _EVAL_CTX
    episode: TestEpisode = ctx["episodes"][index]
    rng = np.random.default_rng(np.random.SeedSequence((ctx["seed"], 0xE7A1, index)))
    ids = [v for v, _ in episode.support] + [v for v, _ in episode.query]
    items = ctx["embedder"].embed_eval(ids, rng)
    ns = len(episode.support)
    support = [(items[i], label) for i, (_, label) in enumerate(episode.support)]
    query = [(items[ns + i], label) for i, (_, label) in enumerate(episode.query)]
    return run_episode(ctx["head"], (support, query), ctx["protocol"],
                       ctx["learner"], ctx["scale_init"])


def meta_test(head: MetaHead, episodes: list[TestEpisode], protocol: TestProtocol,
              embedder: Embedder, seed: int, learner: str = "maml",
              scale_init: float = 10.0, workers: int = 1):
    """Evaluate episodes under the refresh contract; returns (accs, reinit_any).

    Every episode adapts a fresh copy of the meta-trained parameters, so the
    head passed in is left bit-identical.  Episodes are independent given the
    per-episode rng streams, which makes worker sharding order-free.
    """
    _EVAL_CTX.update({"episodes": episodes, "head": head, "protocol": protocol,
                      "embedder": embedder, "seed": seed, "learner": learner,
                      "scale_init": scale_init})
    n = len(episodes)
    try:
        if workers > 1 and n >= 2 * workers:
            bounds = np.linspace(0, n, workers + 1).astype(int)
            spans = [(int(bounds[i]), int(bounds[i + 1])) for i in range(workers)]
            with multiprocessing.get_context("fork").Pool(workers) as pool:
                chunks = pool.map(_eval_span, spans)
            results = [r for chunk in chunks for r in chunk]
        else:
            results = [_eval_one(i) for i in range(n)]
    finally:
        _EVAL_CTX.clear()
    accs = np.array([acc for acc, _ in results])
    reinit = any(flag for _, flag in results)
    return accs, reinit
