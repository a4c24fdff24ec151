"""Two-stream encoders and projection heads.

The appearance encoder embeds individual frames (embeddings averaged over
the view); the action encoder embeds the flattened clip stack, so frame
order is encoded positionally.  Both are plain MLPs: the contrastive and
meta-learning machinery only consumes the embeddings, and perceptrons keep
the differentiable op set minimal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .tensorfile import read_tensor_file, write_tensor_file


@dataclass
class Mlp:
    """Dense layers with relu between them (none after the last)."""

    weights: list[Tensor]
    biases: list[Tensor]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"mlp: input width {x.shape[-1]} != expected {self.in_dim}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, w), b)
            if i < last:
                h = ad.relu(h)
        return h

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        """Gradient-free forward pass for frozen-encoder use."""
        h = np.asarray(x, dtype=np.float64)
        if h.shape[-1] != self.in_dim:
            raise ShapeError(f"mlp: input width {h.shape[-1]} != expected {self.in_dim}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < last:
                h = np.maximum(h, 0.0)
        return h


def init_mlp(rng: np.random.Generator, dims: list[int]) -> Mlp:
    """He init for hidden layers, 1/sqrt(fan_in) for the output layer.

    Hidden biases start slightly positive so relu units rarely die; an
    all-dead layer would emit exactly-zero embeddings, which the cosine
    losses reject.
    """
    weights, biases = [], []
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        hidden = i < len(dims) - 2
        std = np.sqrt((2.0 if hidden else 1.0) / fan_in)
        weights.append(Tensor(rng.normal(0.0, std, (dims[i], dims[i + 1])),
                              requires_grad=True))
        bias = np.full(dims[i + 1], 0.01) if hidden else np.zeros(dims[i + 1])
        biases.append(Tensor(bias, requires_grad=True))
    return Mlp(weights, biases)


@dataclass
class StreamEmbeddings:
    frame_embeddings: Tensor  # (F, D)
    appearance_mean: Tensor   # (D,)
    action: Tensor            # (D,)


PIXEL_CENTER = 0.5  # [0,1] pixels are centered before encoding; an uncentered
                    # all-positive input collapses relu features into one cone


def flatten_frames(frames: np.ndarray) -> np.ndarray:
    """(F, C, H, W) -> centered (F, C*H*W) encoder rows."""
    rows = np.ascontiguousarray(frames).reshape(frames.shape[0], -1)
    return rows - PIXEL_CENTER


def flatten_clip(frames: np.ndarray) -> np.ndarray:
    """(S*L, C, H, W) -> one centered (1, S*L*C*H*W) row; order carries time."""
    return np.ascontiguousarray(frames).reshape(1, -1) - PIXEL_CENTER


def encode_appearance(frames, encoder: Mlp) -> tuple[Tensor, Tensor]:
    """Per-frame embeddings and their mean for one view."""
    x = frames if isinstance(frames, Tensor) else Tensor(flatten_frames(np.asarray(frames)))
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"encode_appearance: expected (F, width) rows, got {x.shape}")
    per_frame = encoder.forward(x)
    return per_frame, ad.mean(per_frame, axis=0)


def encode_action(clip, encoder: Mlp) -> Tensor:
    """Single clip embedding; raises when the flattened width disagrees."""
    x = clip if isinstance(clip, Tensor) else Tensor(flatten_clip(np.asarray(clip)))
    if x.shape != (1, encoder.in_dim):
        raise ShapeError(f"encode_action: clip width {x.shape} != (1, {encoder.in_dim}); "
                         "wrong frame count or resolution")
    return ad.reshape(encoder.forward(x), (encoder.out_dim,))


def project(h, head: Mlp) -> Tensor:
    """Projection for contrastive training; discarded at test time."""
    x = h if isinstance(h, Tensor) else Tensor(np.asarray(h, dtype=np.float64))
    single = x.ndim == 1
    if single:
        x = ad.reshape(x, (1, x.shape[0]))
    z = head.forward(x)
    return ad.reshape(z, (head.out_dim,)) if single else z


@dataclass
class TwoStreamModel:
    appearance: Mlp
    action: Mlp
    appearance_proj: Mlp
    action_proj: Mlp
    joint_proj: Mlp | None = None

    def named_params(self) -> dict[str, Tensor]:
        groups = {"appearance": self.appearance, "action": self.action,
                  "appearance_proj": self.appearance_proj,
                  "action_proj": self.action_proj}
        if self.joint_proj is not None:
            groups["joint_proj"] = self.joint_proj
        out = {}
        for gname, mlp in groups.items():
            for pname, t in mlp.params().items():
                out[f"{gname}.{pname}"] = t
        return out


def build_model(rng: np.random.Generator, appearance_in: int, action_in: int,
                hidden: int = 256, embed_dim: int = 64, proj_hidden: int = 128,
                proj_dim: int = 128, joint_head: bool = False) -> TwoStreamModel:
    model = TwoStreamModel(
        appearance=init_mlp(rng, [appearance_in, hidden, hidden, embed_dim]),
        action=init_mlp(rng, [action_in, hidden, hidden, embed_dim]),
        appearance_proj=init_mlp(rng, [embed_dim, proj_hidden, proj_dim]),
        action_proj=init_mlp(rng, [embed_dim, proj_hidden, proj_dim]),
    )
    if joint_head:
        model.joint_proj = init_mlp(rng, [2 * embed_dim, proj_hidden, proj_dim])
    return model


# ---------------------------------------------------------------------------
# parameter checkpoints: one tensor file per parameter plus a JSON index


def save_checkpoint(out_dir, named: dict[str, Tensor | np.ndarray],
                    meta: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {"params": {}, "meta": meta or {}}
    for i, name in enumerate(sorted(named)):
        fname = f"p{i:04d}.muvt"
        value = named[name]
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        write_tensor_file(out_dir / fname, arr, dtype="f64")
        index["params"][name] = fname
    (out_dir / "index.json").write_text(
        json.dumps(index, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(ckpt_dir) -> tuple[dict[str, np.ndarray], dict]:
    ckpt_dir = Path(ckpt_dir)
    index = json.loads((ckpt_dir / "index.json").read_text(encoding="utf-8"))
    params = {name: read_tensor_file(ckpt_dir / fname)
              for name, fname in index["params"].items()}
    return params, index.get("meta", {})


def model_from_checkpoint(ckpt_dir) -> tuple[TwoStreamModel, dict]:
    params, meta = load_checkpoint(ckpt_dir)

    def mlp_from(prefix: str) -> Mlp | None:
        ws, bs, i = [], [], 0
        while f"{prefix}.w{i}" in params:
            ws.append(Tensor(params[f"{prefix}.w{i}"], requires_grad=True))
            bs.append(Tensor(params[f"{prefix}.b{i}"], requires_grad=True))
            i += 1
        return Mlp(ws, bs) if ws else None

    model = TwoStreamModel(
        appearance=mlp_from("appearance"),
        action=mlp_from("action"),
        appearance_proj=mlp_from("appearance_proj"),
        action_proj=mlp_from("action_proj"),
        joint_proj=mlp_from("joint_proj"),
    )
    return model, meta
