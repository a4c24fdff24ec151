"""Synthetic video dataset: generation, temporal sampling, augmentation, disk format.

Videos show a soft-edged disk following a circular path over a flat
background.  The appearance factor controls colors (or a high-frequency
stripe texture in "texture" mode); the motion factor controls the angular
speed of the path.  The two factors are independently controllable, so
frame statistics separate appearance classes while frame-difference
statistics separate motion classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .tensorfile import read_tensor_file, write_tensor_file

TRAIN_SPLIT = "unlabeled-train"
NOVEL_SPLIT = "novel-test"


class DatasetError(Exception):
    pass


# ---------------------------------------------------------------------------
# dataset description and generation


@dataclass(frozen=True)
class DatasetSpec:
    appearance_classes: int = 8
    motion_classes: int = 8
    train_classes: int = 40
    novel_classes: int = 24
    videos_per_train_class: int = 4
    videos_per_novel_class: int = 6
    frames: int = 32
    height: int = 32
    width: int = 32
    noise_std: float = 0.04
    flicker_rate: float = 0.25
    flicker_strength: float = 0.5
    appearance_mode: str = "color"  # "color" | "texture"
    seed: int = 0
    # explicit joint-class splits override the random assignment when set
    train_class_ids: tuple[int, ...] | None = None
    novel_class_ids: tuple[int, ...] | None = None


@dataclass(frozen=True)
class VideoRecord:
    video_id: int
    file: str
    appearance_class: int
    motion_class: int
    joint_class: int
    split: str


@dataclass
class Manifest:
    records: list[VideoRecord]
    frames: int
    channels: int
    height: int
    width: int
    seed: int

    def split_ids(self, split: str) -> list[int]:
        return [r.video_id for r in self.records if r.split == split]

    def by_id(self, video_id: int) -> VideoRecord:
        return self._index()[video_id]

    def _index(self) -> dict[int, VideoRecord]:
        if not hasattr(self, "_idx"):
            self._idx = {r.video_id: r for r in self.records}
        return self._idx

    def novel_classes(self) -> dict[int, list[int]]:
        """joint class -> video ids within the novel split."""
        out: dict[int, list[int]] = {}
        for r in self.records:
            if r.split == NOVEL_SPLIT:
                out.setdefault(r.joint_class, []).append(r.video_id)
        return out


def _class_palette(spec: DatasetSpec, appearance: int):
    """Background/foreground colors with constant contrast magnitude.

    Classes differ by direction in a 2-d chroma plane around mid gray, so
    frame-difference energy stays appearance-independent while per-frame
    color statistics separate the classes.
    """
    e1 = np.array([1.0, -1.0, 0.0]) / np.sqrt(2.0)
    e2 = np.array([1.0, 1.0, -2.0]) / np.sqrt(6.0)
    theta = 2.0 * np.pi * appearance / spec.appearance_classes + 0.7
    chroma = np.cos(theta) * e1 + np.sin(theta) * e2
    gray = np.full(3, 0.5)
    rho = 0.21
    return gray - rho * chroma, gray + rho * chroma


def _motion_omega(spec: DatasetSpec, motion: int) -> float:
    """Distinct angular speed per motion class (radians per frame)."""
    return 2.0 * np.pi * (0.6 + 0.45 * motion) / spec.frames


def render_one_video(spec: DatasetSpec, video_id: int, appearance: int,
                     motion: int) -> np.ndarray:
    """Deterministic (spec.seed, video_id) -> (T, 3, H, W) array in [0, 1]."""
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, video_id)))
    t, h, w = spec.frames, spec.height, spec.width
    bg, fg = _class_palette(spec, appearance)
    use_stripes = spec.appearance_mode == "texture"
    if use_stripes:
        # all classes share colors; only the stripe orientation identifies them
        bg = np.full(3, 0.35)
        fg = np.full(3, 0.5)
        stripe_angle = np.pi * appearance / spec.appearance_classes
        c1 = np.array([0.25, 0.3, 0.35])
        c2 = np.array([0.75, 0.7, 0.65])
    else:
        stripe_angle = 0.0
        c1 = c2 = np.zeros(3)
    radius = 0.22 * min(h, w) * (1.0 + 0.1 * (rng.random() - 0.5))
    orbit_r = 0.28 * min(h, w)
    omega = _motion_omega(spec, motion)
    phase0 = rng.random() * 2.0 * np.pi
    stripe_phase = rng.random() * 2.0 * np.pi
    flicker_w = np.zeros(t)
    flicker_rgb = np.zeros((t, 3))
    if spec.flicker_rate > 0:
        hits = rng.random(t) < spec.flicker_rate
        flicker_w[hits] = spec.flicker_strength
        flicker_rgb[hits] = rng.random((int(hits.sum()), 3))
    noise = rng.normal(0.0, spec.noise_std, (t, 3, h, w))
    return kernels.render_video(t, h, w, bg, fg, radius, orbit_r, omega, phase0,
                                use_stripes, stripe_angle, 4.0, stripe_phase,
                                c1, c2, flicker_w, flicker_rgb, noise)


def _assign_splits(spec: DatasetSpec) -> tuple[list[int], list[int]]:
    total = spec.appearance_classes * spec.motion_classes
    if spec.train_class_ids is not None or spec.novel_class_ids is not None:
        train = list(spec.train_class_ids or ())
        novel = list(spec.novel_class_ids or ())
        if set(train) & set(novel):
            raise DatasetError("train and novel joint classes overlap")
        if any(c < 0 or c >= total for c in train + novel):
            raise DatasetError(f"joint class id outside [0, {total})")
        return train, novel
    if spec.train_classes + spec.novel_classes > total:
        raise DatasetError(
            f"{spec.train_classes}+{spec.novel_classes} classes requested, "
            f"grid has only {total}")
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0xC1A55)))
    order = [int(c) for c in rng.permutation(total)]
    return (order[:spec.train_classes],
            order[spec.train_classes:spec.train_classes + spec.novel_classes])


def generate_dataset(spec: DatasetSpec, out_dir) -> Manifest:
    """Render every video and write the on-disk dataset directory."""
    if spec.appearance_classes < 2 or spec.motion_classes < 2:
        raise DatasetError("need at least 2 appearance and 2 motion classes")
    if spec.height < 8 or spec.width < 8:
        raise DatasetError(f"frame size {spec.height}x{spec.width} too small to render (< 8)")
    if spec.appearance_mode not in ("color", "texture"):
        raise DatasetError(f"unknown appearance_mode {spec.appearance_mode!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, novel = _assign_splits(spec)
    records: list[VideoRecord] = []
    video_id = 0
    for split, classes, per_class in ((TRAIN_SPLIT, train, spec.videos_per_train_class),
                                      (NOVEL_SPLIT, novel, spec.videos_per_novel_class)):
        for joint in classes:
            appearance = joint // spec.motion_classes
            motion = joint % spec.motion_classes
            for _ in range(per_class):
                frames = render_one_video(spec, video_id, appearance, motion)
                name = f"v{video_id}.muvt"
                write_tensor_file(out_dir / name, frames, dtype="f32")
                records.append(VideoRecord(video_id, name, appearance, motion,
                                           int(joint), split))
                video_id += 1
    manifest = Manifest(records, spec.frames, 3, spec.height, spec.width, spec.seed)
    write_manifest(manifest, out_dir)
    return manifest


def write_manifest(manifest: Manifest, out_dir) -> None:
    payload = {
        "frames": manifest.frames,
        "channels": manifest.channels,
        "height": manifest.height,
        "width": manifest.width,
        "seed": manifest.seed,
        "videos": [
            {
                "video_id": r.video_id,
                "file": r.file,
                "appearance_class": r.appearance_class,
                "motion_class": r.motion_class,
                "joint_class": r.joint_class,
                "split": r.split,
            }
            for r in manifest.records
        ],
    }
    text = json.dumps(payload, indent=1, sort_keys=True)
    (Path(out_dir) / "manifest.json").write_text(text + "\n", encoding="utf-8")


def load_manifest(dataset_dir) -> Manifest:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no manifest.json in {dataset_dir}")
    payload = json.loads(path.read_text(encoding="utf-8"))
    records = [VideoRecord(v["video_id"], v["file"], v["appearance_class"],
                           v["motion_class"], v["joint_class"], v["split"])
               for v in payload["videos"]]
    ids = [r.video_id for r in records]
    if len(ids) != len(set(ids)):
        raise DatasetError("duplicate video ids in manifest")
    return Manifest(records, payload["frames"], payload["channels"],
                    payload["height"], payload["width"], payload["seed"])


def load_video(dataset_dir, record: VideoRecord) -> np.ndarray:
    return read_tensor_file(Path(dataset_dir) / record.file)


# ---------------------------------------------------------------------------
# temporal sampling schemes


@dataclass(frozen=True)
class SamplingScheme:
    """Temporal sampling parameterization.

    kind "frames": one frame from each of `segments` equal segments.
    kind "clips": one contiguous `clip_len`-frame clip from each segment.
    kind "downsample": a contiguous `window`-frame span per segment,
    decimated to `clip_len` frames by stride window // clip_len.
    """

    kind: str
    segments: int
    clip_len: int = 1
    window: int = 0
    resolution: tuple[int, int] = (16, 16)

    @property
    def total_frames(self) -> int:
        return self.segments * self.clip_len


_SCHEME_NAMES = {
    "4x1": ("frames", 4, 1, 0),
    "8x1": ("frames", 8, 1, 0),
    "16x1": ("frames", 16, 1, 0),
    "4x4": ("clips", 4, 4, 0),
    "32->16": ("downsample", 1, 16, 32),
    "8->4x4": ("downsample", 4, 4, 8),
}


def parse_scheme(name: str, resolution: tuple[int, int]) -> SamplingScheme:
    key = name.strip().lower().replace("→", "->")
    if key not in _SCHEME_NAMES:
        raise DatasetError(f"unknown sampling scheme {name!r}; known: {sorted(_SCHEME_NAMES)}")
    kind, segments, clip_len, window = _SCHEME_NAMES[key]
    return SamplingScheme(kind, segments, clip_len, window, tuple(resolution))


def segment_bounds(total: int, parts: int) -> list[tuple[int, int]]:
    """Equal partition; the last segment absorbs the remainder frames."""
    base = total // parts
    bounds = [(k * base, (k + 1) * base) for k in range(parts - 1)]
    bounds.append(((parts - 1) * base, total))
    return bounds


def sample_frame_indices(total: int, scheme: SamplingScheme,
                         rng: np.random.Generator) -> np.ndarray:
    """Strictly increasing frame indices drawn per the scheme."""
    if scheme.kind == "frames":
        if total < scheme.segments:
            raise DatasetError(f"video of {total} frames too short for "
                               f"{scheme.segments} segments")
        return np.array([int(rng.integers(lo, hi))
                         for lo, hi in segment_bounds(total, scheme.segments)])
    if scheme.kind == "clips":
        idx = []
        for lo, hi in segment_bounds(total, scheme.segments):
            if hi - lo < scheme.clip_len:
                raise DatasetError(f"segment of {hi - lo} frames shorter than "
                                   f"clip length {scheme.clip_len}")
            start = int(rng.integers(lo, hi - scheme.clip_len + 1))
            idx.extend(range(start, start + scheme.clip_len))
        return np.array(idx)
    if scheme.kind == "downsample":
        stride = scheme.window // scheme.clip_len
        idx = []
        for lo, hi in segment_bounds(total, scheme.segments):
            if hi - lo < scheme.window:
                raise DatasetError(f"segment of {hi - lo} frames shorter than "
                                   f"window {scheme.window}")
            start = int(rng.integers(lo, hi - scheme.window + 1))
            idx.extend(range(start, start + scheme.window, stride))
        return np.array(idx)
    raise DatasetError(f"unknown scheme kind {scheme.kind!r}")


def sample_appearance_view(video: np.ndarray, scheme: SamplingScheme,
                           rng: np.random.Generator) -> np.ndarray:
    """F frames, one per segment, resized to the scheme resolution."""
    if scheme.kind != "frames":
        raise DatasetError(f"appearance sampling expects a frames-per-segment "
                           f"scheme, got {scheme.kind!r}")
    idx = sample_frame_indices(video.shape[0], scheme, rng)
    return kernels.resize_area(video[idx], scheme.resolution)


def sample_action_view(video: np.ndarray, scheme: SamplingScheme,
                       rng: np.random.Generator) -> np.ndarray:
    """S*L clip frames in temporal order, resized to the scheme resolution."""
    if scheme.kind not in ("clips", "downsample"):
        raise DatasetError(f"action sampling expects a clips scheme, got {scheme.kind!r}")
    idx = sample_frame_indices(video.shape[0], scheme, rng)
    return kernels.resize_area(video[idx], scheme.resolution)


# ---------------------------------------------------------------------------
# clip-wise consistent augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    crop_scale_range: tuple[float, float] = (0.6, 1.0)
    hflip_prob: float = 0.5
    jitter_strength: float = 0.4
    grayscale_prob: float = 0.2
    blur_kernel: int = 3
    seed_policy: str = "clip-wise-consistent"

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise DatasetError(f"crop_scale_range {self.crop_scale_range} outside (0, 1]")
        for name in ("hflip_prob", "grayscale_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise DatasetError(f"{name}={p} outside [0, 1]")


@dataclass(frozen=True)
class AugmentParams:
    """One transform draw, applied identically to every frame of a view."""

    crop_y: int
    crop_x: int
    crop_h: int
    crop_w: int
    hflip: bool
    gains: tuple[float, float, float]
    biases: tuple[float, float, float]
    to_gray: bool
    blur: bool


def draw_augment_params(cfg: AugmentationConfig, in_hw: tuple[int, int],
                        rng: np.random.Generator) -> AugmentParams:
    h, w = in_hw
    lo, hi = cfg.crop_scale_range
    crop_h = crop_w = crop_y = crop_x = 0
    for _ in range(10):
        s = lo + (hi - lo) * rng.random()
        crop_h, crop_w = int(round(s * h)), int(round(s * w))
        if crop_h >= 1 and crop_w >= 1:
            break
    else:
        crop_h, crop_w = h, w  # degenerate draws exhausted: center crop
        crop_y, crop_x = 0, 0
    crop_y = int(rng.integers(0, h - crop_h + 1))
    crop_x = int(rng.integers(0, w - crop_w + 1))
    hflip = rng.random() < cfg.hflip_prob
    s = cfg.jitter_strength
    gains = tuple(1.0 + s * (2.0 * rng.random(3) - 1.0))
    biases = tuple(s / 2.0 * (2.0 * rng.random(3) - 1.0))
    to_gray = rng.random() < cfg.grayscale_prob
    return AugmentParams(crop_y, crop_x, crop_h, crop_w, hflip, gains, biases,
                         to_gray, cfg.blur_kernel >= 3)


def apply_augment_params(frames: np.ndarray, params: AugmentParams,
                         out_hw: tuple[int, int]) -> np.ndarray:
    view = frames[..., params.crop_y:params.crop_y + params.crop_h,
                  params.crop_x:params.crop_x + params.crop_w]
    if params.hflip:
        view = view[..., ::-1]
    view = kernels.resize_area(view, out_hw)
    if params.blur:
        view = kernels.box_blur3(view)
    view = kernels.color_affine_clip(view, np.array(params.gains), np.array(params.biases))
    if params.to_gray:
        view = kernels.grayscale(view)
    return view


def augment(frames: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator,
            out_hw: tuple[int, int]) -> np.ndarray:
    if frames.shape[0] == 0:
        raise DatasetError("augment: empty frame stack")
    params = draw_augment_params(cfg, frames.shape[-2:], rng)
    return apply_augment_params(frames, params, out_hw)


def eval_view(frames: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Deterministic evaluation transform: full-frame area resize."""
    return kernels.resize_area(frames, out_hw)
