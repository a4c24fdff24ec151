"""Unsupervised episode construction.

Hard instances are the videos whose own augmentations agree least (lowest
cosine similarity) in the frozen embedding space, mined per stream; episodes
over them use each video as its own class.  Labeled episodes for testing
draw support and query videos from the novel split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import synthvid
from .contrastive import VideoStore, ViewSampler
from .streams import TwoStreamModel, flatten_clip, flatten_frames


class MiningError(Exception):
    pass


@dataclass(frozen=True)
class MiningConfig:
    n: int = 32                      # hard instances per stream
    batch: int = 256                 # videos scored per mining round
    exploration_fraction: float = 0.10
    way: int = 5
    shots: int = 1                   # support augmentations per instance
    queries: int = 1                 # query augmentations per instance

    def __post_init__(self):
        if self.n < self.way:
            raise MiningError(f"n={self.n} must be >= way={self.way}")
        if self.batch < 2 * self.n:
            raise MiningError(f"mining batch {self.batch} must be >= 2n={2 * self.n}")
        if self.exploration_fraction < 0:
            raise MiningError("exploration_fraction must be >= 0")


@dataclass(frozen=True)
class EmbeddedItem:
    """Frozen-encoder embeddings of one augmented (or eval) view pair."""

    ap_frames: np.ndarray  # (F, D)
    act: np.ndarray        # (D,)


@dataclass
class Episode:
    mode: str  # "instance" | "labeled"
    way: int
    support: list[tuple[EmbeddedItem, int]]
    query: list[tuple[EmbeddedItem, int]]


@dataclass(frozen=True)
class TestEpisode:
    """Id-level labeled episode; items are embedded at evaluation time."""

    way: int
    shot: int
    classes: tuple[int, ...]                    # joint class ids, one per label
    support: tuple[tuple[int, int], ...]        # (video_id, label)
    query: tuple[tuple[int, int], ...]


@dataclass
class HardPool:
    video_ids: list[int]
    selected_by: dict[int, str] = field(default_factory=dict)
    scores_ap: dict[int, float] = field(default_factory=dict)
    scores_act: dict[int, float] = field(default_factory=dict)


class Embedder:
    """Frozen-encoder embedding of stream views (no gradients)."""

    def __init__(self, store: VideoStore, model: TwoStreamModel, sampler: ViewSampler):
        self.store = store
        self.model = model
        self.sampler = sampler

    def _embed_views(self, views):
        """views: list of (ap (F,C,h,w), act (SL,C,h,w)) -> list of EmbeddedItem."""
        f = views[0][0].shape[0]
        ap_rows = np.concatenate([flatten_frames(ap) for ap, _ in views], axis=0)
        per_frame = self.model.appearance.forward_np(ap_rows).reshape(len(views), f, -1)
        act_rows = np.concatenate([flatten_clip(act) for _, act in views], axis=0)
        h_act = self.model.action.forward_np(act_rows)
        return [EmbeddedItem(per_frame[i], h_act[i]) for i in range(len(views))]

    def embed_train(self, video_ids, rng: np.random.Generator, draws: int = 1):
        """``draws`` augmented items per video; items grouped per video."""
        views = []
        for vid in video_ids:
            video = self.store.video(int(vid))
            for _ in range(draws):
                views.append(self.sampler.train_views(video, rng))
        items = self._embed_views(views)
        return [items[i * draws:(i + 1) * draws] for i in range(len(video_ids))]

    def embed_eval(self, video_ids, rng: np.random.Generator):
        views = [self.sampler.eval_views(self.store.video(int(vid)), rng)
                 for vid in video_ids]
        return self._embed_views(views)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(a @ b / (na * nb))


def agreement_scores(video_ids, embedder: Embedder, rng: np.random.Generator):
    """Per-stream cosine agreement between two fresh augmentations of each video."""
    video_ids = list(video_ids)
    if len(video_ids) < 2:
        raise MiningError(f"scoring needs at least 2 videos, got {len(video_ids)}")
    per_video = embedder.embed_train(video_ids, rng, draws=2)
    scores_ap, scores_act = [], []
    for items in per_video:
        a, b = items
        scores_ap.append(_cos(a.ap_frames.mean(axis=0), b.ap_frames.mean(axis=0)))
        scores_act.append(_cos(a.act, b.act))
    return np.array(scores_ap), np.array(scores_act)


def _lowest_n(video_ids, scores, n: int) -> list[int]:
    order = sorted(range(len(video_ids)), key=lambda i: (scores[i], video_ids[i]))
    return [video_ids[i] for i in order[:n]]


def mine_hard(video_ids, scores_ap, scores_act, cfg: MiningConfig,
              rng: np.random.Generator) -> HardPool:
    """Union of the per-stream n-argmin sets, extended by random exploration."""
    video_ids = [int(v) for v in video_ids]
    if len(video_ids) < 2 * cfg.n and len(video_ids) < len(set(video_ids)):
        raise MiningError("scores must cover the mining batch")
    n = min(cfg.n, len(video_ids))
    low_ap = _lowest_n(video_ids, scores_ap, n)
    low_act = _lowest_n(video_ids, scores_act, n)
    selected_by = {}
    for v in low_ap:
        selected_by[v] = "appearance"
    for v in low_act:
        selected_by[v] = "both" if v in selected_by else "action"
    base = sorted(selected_by)
    extras_wanted = math.ceil(cfg.exploration_fraction * len(base))
    remainder = sorted(set(video_ids) - set(base))
    extras = []
    if extras_wanted and remainder:
        take = min(extras_wanted, len(remainder))
        extras = sorted(int(v) for v in rng.choice(remainder, size=take, replace=False))
    for v in extras:
        selected_by[v] = "explore"
    pool = HardPool(sorted(base + extras), selected_by)
    for i, v in enumerate(video_ids):
        if v in selected_by:
            pool.scores_ap[v] = float(scores_ap[i])
            pool.scores_act[v] = float(scores_act[i])
    return pool


def mine_hard_brute_force(video_ids, scores_ap, scores_act, cfg: MiningConfig,
                          rng: np.random.Generator) -> list[int]:
    """Full-sort reference for the pool's base + exploration membership."""
    pairs_ap = sorted(zip(scores_ap, video_ids))
    pairs_act = sorted(zip(scores_act, video_ids))
    n = min(cfg.n, len(video_ids))
    base = {v for _, v in pairs_ap[:n]} | {v for _, v in pairs_act[:n]}
    extras_wanted = math.ceil(cfg.exploration_fraction * len(base))
    remainder = sorted(set(video_ids) - base)
    extras = []
    if extras_wanted and remainder:
        take = min(extras_wanted, len(remainder))
        extras = [int(v) for v in rng.choice(remainder, size=take, replace=False)]
    return sorted(base | set(extras))


def build_instance_episodes(pool: HardPool, count: int, embedder: Embedder,
                            cfg: MiningConfig, rng: np.random.Generator) -> list[Episode]:
    """Instance-level episodes: each drawn video is its own class."""
    if len(pool.video_ids) < cfg.way:
        raise MiningError(f"pool of {len(pool.video_ids)} videos smaller than "
                          f"way={cfg.way}")
    episodes = []
    draws = cfg.shots + cfg.queries
    for _ in range(count):
        chosen = rng.choice(pool.video_ids, size=cfg.way, replace=False)
        per_video = embedder.embed_train([int(v) for v in chosen], rng, draws=draws)
        support, query = [], []
        for label, items in enumerate(per_video):
            for item in items[:cfg.shots]:
                support.append((item, label))
            for item in items[cfg.shots:]:
                query.append((item, label))
        episodes.append(Episode("instance", cfg.way, support, query))
    return episodes


def sample_test_episodes(manifest: synthvid.Manifest, way: int, shot: int,
                         episodes: int, rng: np.random.Generator) -> list[TestEpisode]:
    """Labeled novel-class episodes with one query video per class."""
    by_class = manifest.novel_classes()
    eligible = sorted(c for c, vids in by_class.items() if len(vids) >= shot + 1)
    if len(eligible) < way:
        raise MiningError(f"novel split has {len(eligible)} classes with >= "
                          f"{shot + 1} videos; way={way} requested")
    out = []
    for _ in range(episodes):
        classes = [int(c) for c in rng.choice(eligible, size=way, replace=False)]
        support, query = [], []
        for label, joint in enumerate(classes):
            vids = sorted(by_class[joint])
            chosen = rng.choice(vids, size=shot + 1, replace=False)
            for v in chosen[:shot]:
                support.append((int(v), label))
            query.append((int(chosen[shot]), label))
        out.append(TestEpisode(way, shot, tuple(classes), tuple(support), tuple(query)))
    return out
