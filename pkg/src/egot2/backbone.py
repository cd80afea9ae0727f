"""Stage-I task-specific models and the input-adaptation layer.

Each task gets its own small encoder (temporal conv stack or a tiny
transformer) plus a label-space head, trained only on that task's dataset and
then frozen.  ``adapt_input`` maps a clip from one task's format into another
backbone's expected format: linear-interpolation resampling between frame
rates, moving-window extraction when the target span is shorter, exclusion
when it is longer, and modality-pathway selection for multimodal backbones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import container
from .layers import EncoderBlock, sinusoidal_encoding
from .seeding import derive_seed
from .suite import (
    AUDIO,
    VIDEO,
    BinarySpace,
    CategoricalSpace,
    Dataset,
    FrameIndexSpace,
    SequenceSpace,
    TaskSpec,
)

__all__ = [
    "BackboneSpec",
    "BackboneError",
    "AdaptedInput",
    "Excluded",
    "TaskModel",
    "FrozenBackbone",
    "default_backbones",
    "adapt_input",
    "adapt_dataset",
    "resample_matrix",
    "train_task_model",
    "extract_features",
    "freeze",
    "save_checkpoint",
    "load_checkpoint",
    "labels_to_target",
    "head_loss",
    "head_predict",
    "head_scores",
]

DEFAULT_STRIDE_S = 8.0


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture + expected input format of one task-specific model."""

    task_id: str
    arch: str = "tconv"  # "tconv" | "transformer"
    layers: int = 2
    width: int = 32  # D_k
    span_s: float = 8.0
    frame_rate_hz: float = 2.0
    modalities: tuple[str, ...] = (VIDEO,)
    video_channels: int = 8
    audio_channels: int = 0
    downsample: int = 1

    def __post_init__(self):
        if self.arch not in ("tconv", "transformer"):
            raise BackboneError(f"{self.task_id}: unknown arch {self.arch!r}")
        if self.layers < 1 or self.width < 1:
            raise BackboneError(f"{self.task_id}: layers and width must be >= 1")
        if self.arch == "transformer" and self.downsample != 1:
            raise BackboneError(f"{self.task_id}: transformer arch has no downsampling")
        frames = self.span_s * self.frame_rate_hz
        if abs(frames - round(frames)) > 1e-9 or round(frames) < 1:
            raise BackboneError(f"{self.task_id}: non-integer frame count {frames}")
        if int(round(frames)) % self.downsample != 0:
            raise BackboneError(
                f"{self.task_id}: downsample {self.downsample} does not divide {int(round(frames))} frames"
            )
        if AUDIO in self.modalities and self.audio_channels < 1:
            raise BackboneError(f"{self.task_id}: audio modality needs audio_channels >= 1")

    @property
    def input_frames(self) -> int:
        return int(round(self.span_s * self.frame_rate_hz))

    @property
    def n_tokens(self) -> int:
        """Feature frames per window (T_k) after temporal downsampling."""
        return self.input_frames // self.downsample

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "arch": self.arch,
            "layers": self.layers,
            "width": self.width,
            "span_s": self.span_s,
            "frame_rate_hz": self.frame_rate_hz,
            "modalities": list(self.modalities),
            "video_channels": self.video_channels,
            "audio_channels": self.audio_channels,
            "downsample": self.downsample,
        }

    @staticmethod
    def from_json(doc: dict) -> "BackboneSpec":
        return BackboneSpec(
            task_id=doc["task_id"],
            arch=doc.get("arch", "tconv"),
            layers=int(doc.get("layers", 2)),
            width=int(doc.get("width", 32)),
            span_s=float(doc["span_s"]),
            frame_rate_hz=float(doc["frame_rate_hz"]),
            modalities=tuple(doc.get("modalities", [VIDEO])),
            video_channels=int(doc.get("video_channels", 8)),
            audio_channels=int(doc.get("audio_channels", 0)),
            downsample=int(doc.get("downsample", 1)),
        )


def default_backbones(suite: list[TaskSpec], synergy) -> dict[str, BackboneSpec]:
    """Heterogeneous per-task defaults: distinct widths and one transformer."""
    widths = {"LOC": 32, "SCC": 32, "REC": 48, "ANT": 64, "TLK": 32}
    out = {}
    for i, spec in enumerate(suite):
        arch = "transformer" if isinstance(spec.label_space, SequenceSpace) else "tconv"
        out[spec.task_id] = BackboneSpec(
            task_id=spec.task_id,
            arch=arch,
            layers=2,
            width=widths.get(spec.task_id, 32 + 16 * (i % 3)),
            span_s=spec.span_s,
            frame_rate_hz=spec.frame_rate_hz,
            modalities=spec.modalities,
            video_channels=synergy.video_channels,
            audio_channels=synergy.audio_channels if AUDIO in spec.modalities else 0,
        )
    return out


# ---------------------------------------------------------------------------
# Encoders and heads
# ---------------------------------------------------------------------------

class _TConvPathway(nn.Module):
    """Stack of 1-D convolutions over time; stride on the first layer."""

    def __init__(self, in_channels: int, width: int, layers: int, downsample: int):
        super().__init__()
        convs = []
        for i in range(layers):
            convs.append(
                nn.Conv1d(
                    in_channels if i == 0 else width,
                    width,
                    kernel_size=5,
                    padding=2,
                    stride=downsample if i == 0 else 1,
                )
            )
        self.convs = nn.ModuleList(convs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, T, C) -> (B, T', width)
        h = x.transpose(1, 2)
        for conv in self.convs:
            h = torch.nn.functional.gelu(conv(h))
        return h.transpose(1, 2)


class _TransformerPathway(nn.Module):
    def __init__(self, in_channels: int, width: int, layers: int, n_frames: int, n_heads: int = 4):
        super().__init__()
        self.inp = nn.Linear(in_channels, width)
        self.blocks = nn.ModuleList(EncoderBlock(width, n_heads) for _ in range(layers))
        pe = sinusoidal_encoding(torch.arange(n_frames, dtype=torch.float32), width)
        self.register_buffer("pos", pe, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.inp(x) + self.pos[None, : x.shape[1]]
        for block in self.blocks:
            h, _ = block(h)
        return h


def make_head(space, width: int) -> nn.Module:
    if isinstance(space, FrameIndexSpace):
        return nn.Linear(width, 1)
    if isinstance(space, BinarySpace):
        return nn.Linear(width, 2)
    if isinstance(space, CategoricalSpace):
        return nn.Linear(width, space.n_classes)
    if isinstance(space, SequenceSpace):
        return nn.Linear(width, space.horizon * space.vocab_size)
    raise BackboneError(f"unhandled label space {space!r}")


class TaskModel(nn.Module):
    """Backbone encoder(s) + label-space head for one task."""

    def __init__(self, task: TaskSpec, spec: BackboneSpec):
        super().__init__()
        if task.task_id != spec.task_id:
            raise BackboneError(f"task {task.task_id} != backbone {spec.task_id}")
        if isinstance(task.label_space, FrameIndexSpace) and spec.downsample != 1:
            raise BackboneError(f"{task.task_id}: frame_index head needs downsample=1")
        self.task = task
        self.spec = spec
        self.label_space = task.label_space
        if spec.arch == "tconv":
            self.video_path = _TConvPathway(spec.video_channels, spec.width, spec.layers, spec.downsample)
        else:
            self.video_path = _TransformerPathway(spec.video_channels, spec.width, spec.layers, spec.input_frames)
        if AUDIO in spec.modalities:
            if spec.arch == "tconv":
                self.audio_path = _TConvPathway(spec.audio_channels, spec.width, spec.layers, spec.downsample)
            else:
                self.audio_path = _TransformerPathway(spec.audio_channels, spec.width, spec.layers, spec.input_frames)
        else:
            self.audio_path = None
        self.head = make_head(task.label_space, spec.width)

    def features(self, video: torch.Tensor, audio: torch.Tensor | None = None) -> torch.Tensor:
        """Penultimate representation, (B, T_k, D_k).

        A multimodal model falls back to its video pathway alone when the
        clip carries no audio.
        """
        if video.shape[-1] != self.spec.video_channels:
            raise BackboneError(
                f"{self.spec.task_id}: expected {self.spec.video_channels} video channels, got {video.shape[-1]}"
            )
        if video.shape[-2] != self.spec.input_frames:
            raise BackboneError(
                f"{self.spec.task_id}: expected {self.spec.input_frames} frames, got {video.shape[-2]}"
            )
        h = self.video_path(video)
        if self.audio_path is not None and audio is not None:
            h = h + self.audio_path(audio)
        return h

    def forward(self, video: torch.Tensor, audio: torch.Tensor | None = None) -> torch.Tensor:
        h = self.features(video, audio)
        if isinstance(self.label_space, FrameIndexSpace):
            return self.head(h).squeeze(-1)  # (B, T)
        pooled = h.mean(dim=1)
        logits = self.head(pooled)
        if isinstance(self.label_space, SequenceSpace):
            return logits.view(-1, self.label_space.horizon, self.label_space.vocab_size)
        return logits


# ---------------------------------------------------------------------------
# Label/tensor conversion shared by every head-style trainer
# ---------------------------------------------------------------------------

def labels_to_target(space, labels: list) -> torch.Tensor:
    if isinstance(space, SequenceSpace):
        return torch.tensor([list(lab) for lab in labels], dtype=torch.long)
    if isinstance(space, BinarySpace):
        return torch.tensor([int(bool(lab)) for lab in labels], dtype=torch.long)
    return torch.tensor([int(lab) for lab in labels], dtype=torch.long)


def head_loss(space, logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if isinstance(space, SequenceSpace):
        return torch.nn.functional.cross_entropy(
            logits.reshape(-1, space.vocab_size), target.reshape(-1)
        )
    return torch.nn.functional.cross_entropy(logits, target)


def head_predict(space, logits: torch.Tensor) -> list:
    if isinstance(space, SequenceSpace):
        idx = logits.argmax(dim=-1)
        return [tuple(int(v) for v in row) for row in idx]
    idx = logits.argmax(dim=-1)
    if isinstance(space, BinarySpace):
        return [bool(int(v)) for v in idx]
    return [int(v) for v in idx]


def head_scores(space, logits: torch.Tensor) -> list[float] | None:
    """Positive-class score for binary tasks (used by mAP); None otherwise."""
    if isinstance(space, BinarySpace):
        return torch.softmax(logits, dim=-1)[:, 1].tolist()
    return None


# ---------------------------------------------------------------------------
# Input adaptation
# ---------------------------------------------------------------------------

@dataclass
class AdaptedInput:
    """Windows of one clip in a backbone's expected format.

    Each window is a dict modality -> (frames, channels) float32 array;
    ``window_starts_s`` gives each window's start on the source timeline.
    """

    windows: list[dict[str, np.ndarray]]
    window_starts_s: list[float]
    video_pathway_only: bool = False


@dataclass(frozen=True)
class Excluded:
    """Marker: this backbone cannot consume the primary task's clips."""

    reason: str
    detail: str = ""


def resample_matrix(n_from: int, rate_from: float, n_to: int, rate_to: float) -> np.ndarray:
    """(n_to, n_from) linear-interpolation matrix between frame grids.

    Target times outside the source range clamp to the nearest source frame,
    so frame 0 always maps to frame 0 and integer-ratio grids land exactly on
    source frames.
    """
    times_to = np.arange(n_to) / rate_to
    times_from = np.arange(n_from) / rate_from
    mat = np.zeros((n_to, n_from), dtype=np.float64)
    for i, t in enumerate(times_to):
        j = np.searchsorted(times_from, t, side="right") - 1
        if j < 0:
            mat[i, 0] = 1.0
        elif j >= n_from - 1:
            mat[i, n_from - 1] = 1.0
        else:
            frac = (t - times_from[j]) / (times_from[j + 1] - times_from[j])
            if frac < 1e-12:
                mat[i, j] = 1.0
            else:
                mat[i, j] = 1.0 - frac
                mat[i, j + 1] = frac
    return mat


def window_count(from_span: float, to_span: float, stride_s: float) -> int:
    return int(math.floor(round((from_span - to_span) / stride_s, 9))) + 1


def window_starts(from_span: float, to_span: float, stride_s: float) -> list[float]:
    return [w * stride_s for w in range(window_count(from_span, to_span, stride_s))]


def adapt_input(
    arrays: dict[str, np.ndarray],
    from_spec: TaskSpec,
    to_spec: BackboneSpec,
    stride_s: float = DEFAULT_STRIDE_S,
) -> AdaptedInput | Excluded:
    """Map one clip of ``from_spec`` into ``to_spec``'s expected format."""
    if stride_s <= 0:
        raise BackboneError(f"stride_s must be > 0, got {stride_s}")
    if to_spec.span_s > from_spec.span_s + 1e-9:
        return Excluded("span", f"backbone needs {to_spec.span_s}s, clip has {from_spec.span_s}s")
    if VIDEO not in arrays:
        return Excluded("modality", "clip has no video channels")

    video_only = AUDIO in to_spec.modalities and AUDIO not in arrays
    needed = [m for m in to_spec.modalities if m in arrays]

    full_frames = int(round(from_spec.span_s * to_spec.frame_rate_hz))
    resampled = {}
    for m in needed:
        src = arrays[m]
        mat = resample_matrix(src.shape[0], from_spec.frame_rate_hz, full_frames, to_spec.frame_rate_hz)
        resampled[m] = (mat @ src.astype(np.float64)).astype(np.float32)

    starts = window_starts(from_spec.span_s, to_spec.span_s, stride_s)
    win_frames = to_spec.input_frames
    windows = []
    for start in starts:
        lo = int(round(start * to_spec.frame_rate_hz))
        windows.append({m: resampled[m][lo : lo + win_frames] for m in needed})
    return AdaptedInput(windows=windows, window_starts_s=starts, video_pathway_only=video_only)


def adapt_dataset(
    dataset: Dataset, to_spec: BackboneSpec, stride_s: float = DEFAULT_STRIDE_S
) -> "AdaptedBatch | Excluded":
    """Vectorized adapt_input over a whole dataset (same geometry per clip)."""
    probe = adapt_input(dataset.samples[0].arrays, dataset.spec, to_spec, stride_s)
    if isinstance(probe, Excluded):
        return probe
    from_spec = dataset.spec
    full_frames = int(round(from_spec.span_s * to_spec.frame_rate_hz))
    needed = list(probe.windows[0].keys())
    mats = {
        m: resample_matrix(
            dataset.samples[0].arrays[m].shape[0], from_spec.frame_rate_hz, full_frames, to_spec.frame_rate_hz
        )
        for m in needed
    }
    stacked = {
        m: np.einsum(
            "ts,nsc->ntc",
            mats[m],
            np.stack([s.arrays[m] for s in dataset.samples]).astype(np.float64),
        ).astype(np.float32)
        for m in needed
    }
    win_frames = to_spec.input_frames
    slices = []
    for start in probe.window_starts_s:
        lo = int(round(start * to_spec.frame_rate_hz))
        slices.append({m: stacked[m][:, lo : lo + win_frames] for m in needed})
    return AdaptedBatch(
        windows=slices,
        window_starts_s=probe.window_starts_s,
        video_pathway_only=probe.video_pathway_only,
    )


@dataclass
class AdaptedBatch:
    """adapt_dataset output: windows of (n, frames, channels) arrays."""

    windows: list[dict[str, np.ndarray]]
    window_starts_s: list[float]
    video_pathway_only: bool = False


# ---------------------------------------------------------------------------
# Training, freezing, feature extraction
# ---------------------------------------------------------------------------

def _dataset_tensors(dataset: Dataset, spec: BackboneSpec):
    video = torch.from_numpy(np.stack([s.arrays[VIDEO] for s in dataset.samples]))
    audio = None
    if AUDIO in spec.modalities and AUDIO in dataset.samples[0].arrays:
        audio = torch.from_numpy(np.stack([s.arrays[AUDIO] for s in dataset.samples]))
    target = labels_to_target(dataset.spec.label_space, dataset.labels())
    return video, audio, target


def _accuracy(space, model: TaskModel, video, audio, labels) -> float:
    with torch.inference_mode():
        preds = head_predict(space, model(video, audio))
    return float(np.mean([p == l for p, l in zip(preds, labels)]))


def train_task_model(
    task: TaskSpec,
    spec: BackboneSpec,
    train_set: Dataset,
    val_set: Dataset | None = None,
    *,
    lr: float = 1e-3,
    weight_decay: float = 0.0,
    epochs: int = 20,
    batch_size: int = 64,
    seed: int = 0,
) -> tuple[TaskModel, dict]:
    """Stage-I training of one task-specific model on its own dataset.

    Returns the trained model and checkpoint metadata (task_id, seed, epochs,
    final val metric).  Deterministic under (inputs, seed).
    """
    if train_set.spec.task_id != spec.task_id:
        raise BackboneError(f"dataset is {train_set.spec.task_id}, backbone is {spec.task_id}")
    if abs(train_set.spec.span_s - spec.span_s) > 1e-9 or abs(train_set.spec.frame_rate_hz - spec.frame_rate_hz) > 1e-9:
        raise BackboneError(f"{spec.task_id}: backbone span/rate do not match its training data")
    torch.manual_seed(derive_seed(seed, "backbone", spec.task_id))
    model = TaskModel(task, spec)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    video, audio, target = _dataset_tensors(train_set, spec)
    rng = np.random.default_rng(derive_seed(seed, "backbone-batches", spec.task_id))
    n = len(train_set)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = torch.from_numpy(order[lo : lo + batch_size].copy())
            logits = model(video[idx], None if audio is None else audio[idx])
            loss = head_loss(task.label_space, logits, target[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    val_acc = None
    if val_set is not None:
        v_video, v_audio, _ = _dataset_tensors(val_set, spec)
        val_acc = _accuracy(task.label_space, model, v_video, v_audio, val_set.labels())
    meta = {
        "kind": "backbone",
        "task_id": spec.task_id,
        "seed": seed,
        "epochs": epochs,
        "final_val_accuracy": val_acc,
        "backbone": spec.to_json(),
        "task": task.to_json(),
    }
    return model, meta


class FrozenBackbone:
    """Inference-only wrapper enforcing the freeze contract."""

    def __init__(self, model: TaskModel):
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self.model = model
        self.spec = model.spec
        self.task = model.task

    def parameters(self):
        return self.model.parameters()

    def state_bytes(self) -> dict[str, bytes]:
        return {k: v.detach().numpy().tobytes() for k, v in self.model.state_dict().items()}

    def extract_features(self, adapted: AdaptedInput | AdaptedBatch) -> torch.Tensor:
        """Features for one clip (W*T_k, D_k) or a batch (n, W*T_k, D_k)."""
        with torch.inference_mode():
            feats = _window_features(self.model, adapted)
        # clone outside inference mode: the result must be a normal tensor so
        # downstream translator forwards can record it for backward
        return feats.clone()


def _window_features(model: TaskModel, adapted: AdaptedInput | AdaptedBatch) -> torch.Tensor:
    if isinstance(adapted, Excluded):
        raise BackboneError(f"cannot extract features from Excluded ({adapted.reason})")
    single = adapted.windows[0][VIDEO].ndim == 2
    outs = []
    for win in adapted.windows:
        video = torch.from_numpy(np.ascontiguousarray(win[VIDEO]))
        audio = None
        if model.audio_path is not None and not adapted.video_pathway_only and AUDIO in win:
            audio = torch.from_numpy(np.ascontiguousarray(win[AUDIO]))
        if single:
            video = video[None]
            audio = None if audio is None else audio[None]
        outs.append(model.features(video, audio))
    feats = torch.cat(outs, dim=1)  # windows concatenated along time
    return feats[0] if single else feats


def extract_features(model: TaskModel | FrozenBackbone, adapted: AdaptedInput) -> torch.Tensor:
    """Penultimate features of an adapted clip; windows concatenate along time.

    Passing a raw TaskModel keeps gradients flowing into its parameters
    (used by the unfreeze ablation); a FrozenBackbone never does.
    """
    if isinstance(model, FrozenBackbone):
        return model.extract_features(adapted)
    return _window_features(model, adapted)


def freeze(model: TaskModel) -> FrozenBackbone:
    return FrozenBackbone(model)


def token_times_s(spec: BackboneSpec, starts_s: list[float]) -> list[float]:
    """Source-timeline time of every feature token, windows concatenated."""
    times = []
    for start in starts_s:
        for f in range(spec.n_tokens):
            times.append(start + (f * spec.downsample) / spec.frame_rate_hz)
    return times


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: TaskModel, path: str, meta: dict) -> None:
    arrays = {name: t.detach().numpy() for name, t in model.state_dict().items()}
    container.write_arrays(path, arrays, meta)


def load_checkpoint(path: str) -> tuple[TaskModel, dict]:
    arrays, meta = container.read_arrays(path)
    if meta.get("kind") != "backbone":
        raise BackboneError(f"{path}: not a backbone checkpoint (kind={meta.get('kind')!r})")
    task = TaskSpec.from_json(meta["task"])
    spec = BackboneSpec.from_json(meta["backbone"])
    model = TaskModel(task, spec)
    expected = set(model.state_dict().keys())
    got = set(arrays.keys())
    if expected != got:
        missing = sorted(expected - got)
        unexpected = sorted(got - expected)
        raise BackboneError(f"{path}: checkpoint/arch mismatch missing={missing} unexpected={unexpected}")
    state = {name: torch.from_numpy(arrays[name].copy()) for name in arrays}
    model.load_state_dict(state)
    model.eval()
    return model, meta
