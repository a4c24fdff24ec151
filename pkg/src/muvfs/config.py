"""Flat key-value run configuration with a stable digest.

Files are UTF-8 text of ``section.key = value`` lines; ``#`` starts a
comment.  Unknown keys are rejected and every value is type-checked.  The
digest hashes the canonicalized effective configuration (defaults plus
overrides, including the seed), so it identifies a run exactly.
"""

from __future__ import annotations

import hashlib
from pathlib import Path


class ConfigError(Exception):
    pass


def _parse_bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    t = s.strip()
    if not t:
        return ()
    return tuple(int(p.strip()) for p in t.split(","))


_TYPES = {
    int: ("int", lambda s: int(s.strip())),
    float: ("float", lambda s: float(s.strip())),
    bool: ("bool", _parse_bool),
    str: ("str", lambda s: s.strip()),
    tuple: ("int list", _parse_int_list),
}

# key -> default (type inferred from the default's python type)
SCHEMA: dict[str, object] = {
    "run.seed": 0,
    "data.dir": "",
    "paths.encoders": "",
    "paths.meta": "",

    "dataset.appearance_classes": 8,
    "dataset.motion_classes": 8,
    "dataset.train_classes": 40,
    "dataset.novel_classes": 24,
    "dataset.videos_per_train_class": 4,
    "dataset.videos_per_novel_class": 6,
    "dataset.frames": 32,
    "dataset.height": 32,
    "dataset.width": 32,
    "dataset.noise_std": 0.04,
    "dataset.flicker_rate": 0.25,
    "dataset.flicker_strength": 0.5,
    "dataset.appearance_mode": "color",
    "dataset.train_class_ids": (),
    "dataset.novel_class_ids": (),

    "sampling.appearance_scheme": "8x1",
    "sampling.action_scheme": "4x4",
    "sampling.appearance_res": 16,
    "sampling.action_res": 8,

    "augment.crop_scale_min": 0.6,
    "augment.crop_scale_max": 1.0,
    "augment.hflip_prob": 0.5,
    "augment.jitter_strength": 0.4,
    "augment.grayscale_prob": 0.2,
    "augment.blur_kernel": 3,
    "augment.share_spatial_across_streams": False,

    "streams.embed_dim": 64,
    "streams.hidden_dim": 256,
    "streams.proj_hidden": 128,
    "streams.proj_dim": 128,

    "contrastive.tau": 0.1,
    "contrastive.batch_size": 64,
    "contrastive.epochs": 30,
    "contrastive.peak_lr": 0.01,
    "contrastive.final_lr": 0.0,
    "contrastive.warmup_epochs": 2,
    "contrastive.momentum": 0.9,
    "contrastive.joint_loss": False,
    "contrastive.skl_loss": False,

    "mining.n": 32,
    "mining.batch": 256,
    "mining.exploration_fraction": 0.1,
    "mining.enabled": True,
    "mining.dump_pools": False,

    "episode.way": 5,
    "episode.shots": 1,
    "episode.queries": 1,

    "head.kind": "attn",
    "head.d_k": 16,
    "head.d_v": 64,
    "head.classifier_bias": True,

    "meta.alpha": 0.001,
    "meta.beta": 0.05,
    "meta.episodes_per_iter": 10,
    "meta.iterations": 300,
    "meta.inner_steps": 1,
    "meta.order": "first",
    "meta.anneal_floor": 0.1,
    "meta.fast": True,

    "test.finetune_lr": 10.0,
    "test.finetune_epochs": 50,
    "test.episodes": 10000,
    "test.way": 5,
    "test.shot": 1,

    "evaluate.learner": "maml",
    "evaluate.way_list": (),
    "baselinepp.scale": 10.0,
}


def default_config() -> dict:
    return dict(SCHEMA)


def parse_config_text(text: str) -> dict:
    """Defaults overlaid with the file's settings; rejects unknown keys."""
    cfg = default_config()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        expected = type(SCHEMA[key])
        type_name, parser = _TYPES[expected]
        try:
            cfg[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: key {key!r} expects {type_name}: {exc}")
    return cfg


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(encoding="utf-8"))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def canonical_text(cfg: dict) -> str:
    unknown = set(cfg) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    return "\n".join(f"{k} = {_format_value(cfg[k])}" for k in sorted(cfg)) + "\n"


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()[:16]
