"""Cross-attention adaptation head.

The clip-level action embedding forms the attention query; frame-level
appearance embeddings supply keys and values.  Scores are scaled dot products
normalized by softmax, the value vectors are aggregated by the scores, and a
linear classifier consumes the l2-normalized aggregate.  This head plus the
classifier is the meta-learned parameter set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class HeadParams:
    """Key/value/query projections plus the linear classifier."""

    tensors: dict[str, Tensor]
    d_k: int
    d_v: int
    way: int
    classifier_bias: bool = True

    def copy(self) -> "HeadParams":
        return HeadParams(
            {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()},
            self.d_k, self.d_v, self.way, self.classifier_bias,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def names(self) -> list[str]:
        return sorted(self.tensors)


@dataclass
class AttentionRecord:
    scores: Tensor          # (F,) attention weights, sums to 1
    aggregated: Tensor      # (d_v,) score-weighted sum of value vectors


def init_params(rng: np.random.Generator, embed_dim: int, d_k: int, d_v: int, way: int,
                classifier_bias: bool = True) -> HeadParams:
    """Projection heads from N(0, 1/sqrt(fan_in)); classifier zero-initialized."""
    std = 1.0 / np.sqrt(embed_dim)
    tensors = {
        "key_map": Tensor(rng.normal(0.0, std, (embed_dim, d_k)), requires_grad=True),
        "value_map": Tensor(rng.normal(0.0, std, (embed_dim, d_v)), requires_grad=True),
        "query_map": Tensor(rng.normal(0.0, std, (embed_dim, d_k)), requires_grad=True),
        "classifier_w": Tensor(np.zeros((way, d_v)), requires_grad=True),
        "classifier_b": Tensor(np.zeros(way), requires_grad=True),
    }
    return HeadParams(tensors, d_k, d_v, way, classifier_bias)


def attend_tensors(frames: Tensor, action: Tensor, tensors: dict[str, Tensor],
                   d_k: int) -> AttentionRecord:
    """Single-item attention on engine tensors; differentiable end to end."""
    if frames.ndim != 2:
        raise ShapeError(f"attend: frame embeddings must be 2-d, got {frames.shape}")
    f, d = frames.shape
    if f < 1:
        raise ShapeError("attend: need at least one frame embedding")
    if tensors["key_map"].shape[0] != d:
        raise ShapeError(
            f"attend: embedding width {d} does not match key map {tensors['key_map'].shape}")
    if action.shape != (d,):
        raise ShapeError(f"attend: action embedding shape {action.shape}, expected ({d},)")
    keys = ad.matmul(frames, tensors["key_map"])                        # (F, d_k)
    values = ad.matmul(frames, tensors["value_map"])                    # (F, d_v)
    query = ad.matmul(ad.reshape(action, (1, d)), tensors["query_map"])  # (1, d_k)
    raw = ad.sum(ad.mul(keys, query), axis=1)                           # (F,)
    scores = ad.softmax(ad.scale(raw, 1.0 / np.sqrt(d_k)), axis=-1)
    agg = ad.sum(ad.mul(ad.reshape(scores, (f, 1)), values), axis=0)    # (d_v,)
    return AttentionRecord(scores, agg)


def classify_tensors(aggregated: Tensor, tensors: dict[str, Tensor]) -> Tensor:
    """Logits of the classifier over the l2-normalized aggregate."""
    w = tensors["classifier_w"]
    if aggregated.shape != (w.shape[1],):
        raise ShapeError(
            f"classify: input width {aggregated.shape} does not match classifier {w.shape}")
    u = ad.l2_normalize(aggregated, axis=-1)
    logits = ad.reshape(ad.matmul(ad.reshape(u, (1, w.shape[1])), ad.transpose(w)),
                        (w.shape[0],))
    return ad.add(logits, tensors["classifier_b"])


def attend(frames, action, params: HeadParams) -> AttentionRecord:
    """Attention over numpy inputs with the head's parameters."""
    return attend_tensors(ad.Tensor(np.asarray(frames, dtype=np.float64)),
                          ad.Tensor(np.asarray(action, dtype=np.float64)),
                          params.tensors, params.d_k)


def classify(aggregated, params: HeadParams) -> Tensor:
    return classify_tensors(
        aggregated if isinstance(aggregated, Tensor)
        else ad.Tensor(np.asarray(aggregated, dtype=np.float64)),
        params.tensors)


def batched_logits(frames: Tensor, action: Tensor, tensors: dict[str, Tensor],
                   d_k: int) -> Tensor:
    """Attention + classifier over a batch: frames (n, F, D), action (n, D).

    Same math as the single-item path, vectorized for episode-sized batches.
    """
    n, f, d = frames.shape
    flat = ad.reshape(frames, (n * f, d))
    keys = ad.reshape(ad.matmul(flat, tensors["key_map"]), (n, f, -1))
    values = ad.reshape(ad.matmul(flat, tensors["value_map"]), (n, f, -1))
    query = ad.matmul(action, tensors["query_map"])                       # (n, d_k)
    raw = ad.sum(ad.mul(keys, ad.reshape(query, (n, 1, d_k))), axis=2)    # (n, F)
    scores = ad.softmax(ad.scale(raw, 1.0 / np.sqrt(d_k)), axis=-1)
    agg = ad.sum(ad.mul(ad.reshape(scores, (n, f, 1)), values), axis=1)   # (n, d_v)
    u = ad.l2_normalize(agg, axis=-1)
    w = tensors["classifier_w"]
    return ad.add(ad.matmul(u, ad.transpose(w)), tensors["classifier_b"])
