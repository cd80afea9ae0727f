"""Synthetic heterogeneous task suite with controllable inter-task synergy.

Every clip is drawn from one latent vector u ~ Uniform(-1, 1)^n_latents.  A
task's label is a deterministic function of the latents it depends on, so two
tasks are related exactly when their dependency sets intersect; disjoint sets
give independent labels by construction.  Clips render *all* latents as
per-frame channel signals ("video" is a low-dimensional feature series, not
pixels), which is what lets a backbone trained on one task read its latents
out of another task's clips.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .container import FormatError, decode_array, encode_array

__all__ = [
    "FrameIndexSpace",
    "BinarySpace",
    "CategoricalSpace",
    "SequenceSpace",
    "TaskSpec",
    "SynergySpec",
    "Sample",
    "Dataset",
    "SuiteError",
    "make_default_suite",
    "default_synergy",
    "task_label",
    "generate_dataset",
    "split",
    "save_dataset",
    "load_dataset",
]

VIDEO = "video"
AUDIO = "audio"
MODALITIES = (VIDEO, AUDIO)

# Pulse carrier constants: amplitude and temporal width (in frames) of the
# localized bump that marks a frame_index task's labelled frame.
PULSE_AMP = 2.0
PULSE_SIGMA = 0.75


class SuiteError(ValueError):
    """Invalid task-suite or synergy configuration."""


# ---------------------------------------------------------------------------
# Label spaces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FrameIndexSpace:
    """Label = index of the distinguished frame, in [0, n_frames)."""

    n_frames: int

    kind = "frame_index"

    def validate(self) -> None:
        if self.n_frames < 2:
            raise SuiteError(f"frame_index needs >= 2 frames, got {self.n_frames}")

    def labels(self):
        return range(self.n_frames)


@dataclass(frozen=True)
class BinarySpace:
    """Label in {False, True}."""

    kind = "binary"

    def validate(self) -> None:
        pass

    def labels(self):
        return (False, True)


@dataclass(frozen=True)
class CategoricalSpace:
    n_classes: int

    kind = "categorical"

    def validate(self) -> None:
        if self.n_classes < 2:
            raise SuiteError(f"categorical needs >= 2 classes, got {self.n_classes}")

    def labels(self):
        return range(self.n_classes)


@dataclass(frozen=True)
class SequenceSpace:
    """Label = tuple of ``horizon`` symbols from a vocabulary of ``vocab_size``."""

    vocab_size: int
    horizon: int

    kind = "sequence"

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise SuiteError(f"sequence vocab must be >= 2, got {self.vocab_size}")
        if self.horizon < 1:
            raise SuiteError(f"sequence horizon must be >= 1, got {self.horizon}")

    def labels(self):
        # Exhaustive enumeration is only used for small spaces (tokenizer tests).
        def rec(prefix):
            if len(prefix) == self.horizon:
                yield tuple(prefix)
                return
            for s in range(self.vocab_size):
                yield from rec(prefix + [s])

        yield from rec([])


LABEL_SPACE_KINDS = ("frame_index", "binary", "categorical", "sequence")


def label_space_to_json(space) -> dict:
    doc = {"kind": space.kind}
    doc.update(dataclasses.asdict(space))
    return doc


def label_space_from_json(doc: dict):
    kind = doc.get("kind")
    if kind == "frame_index":
        return FrameIndexSpace(int(doc["n_frames"]))
    if kind == "binary":
        return BinarySpace()
    if kind == "categorical":
        return CategoricalSpace(int(doc["n_classes"]))
    if kind == "sequence":
        return SequenceSpace(int(doc["vocab_size"]), int(doc["horizon"]))
    raise SuiteError(f"unknown label-space kind {kind!r}")


# ---------------------------------------------------------------------------
# Task and synergy specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    """Declarative description of one task."""

    task_id: str
    prompt_token: str
    modalities: tuple[str, ...]
    span_s: float
    frame_rate_hz: float
    label_space: FrameIndexSpace | BinarySpace | CategoricalSpace | SequenceSpace
    cluster_id: str = "c0"

    def __post_init__(self):
        if not self.task_id:
            raise SuiteError("task_id must be non-empty")
        if not self.prompt_token:
            raise SuiteError("prompt_token must be non-empty")
        for m in self.modalities:
            if m not in MODALITIES:
                raise SuiteError(f"{self.task_id}: unknown modality {m!r}")
        if VIDEO not in self.modalities:
            raise SuiteError(f"{self.task_id}: every task needs the video modality")
        if self.span_s <= 0 or self.frame_rate_hz <= 0:
            raise SuiteError(f"{self.task_id}: span_s and frame_rate_hz must be > 0")
        frames = self.span_s * self.frame_rate_hz
        if abs(frames - round(frames)) > 1e-9 or round(frames) < 1:
            raise SuiteError(
                f"{self.task_id}: span_s x frame_rate_hz = {frames} is not a positive integer"
            )
        self.label_space.validate()
        if isinstance(self.label_space, FrameIndexSpace) and self.label_space.n_frames != self.n_frames:
            raise SuiteError(
                f"{self.task_id}: frame_index space has {self.label_space.n_frames} frames, "
                f"clip has {self.n_frames}"
            )

    @property
    def n_frames(self) -> int:
        return int(round(self.span_s * self.frame_rate_hz))

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "prompt_token": self.prompt_token,
            "modalities": list(self.modalities),
            "span_s": self.span_s,
            "frame_rate_hz": self.frame_rate_hz,
            "label_space": label_space_to_json(self.label_space),
            "cluster_id": self.cluster_id,
        }

    @staticmethod
    def from_json(doc: dict) -> "TaskSpec":
        return TaskSpec(
            task_id=doc["task_id"],
            prompt_token=doc["prompt_token"],
            modalities=tuple(doc["modalities"]),
            span_s=float(doc["span_s"]),
            frame_rate_hz=float(doc["frame_rate_hz"]),
            label_space=label_space_from_json(doc["label_space"]),
            cluster_id=doc.get("cluster_id", "c0"),
        )


@dataclass
class SynergySpec:
    """Generator configuration shared by all tasks of a suite.

    task_dependency maps task_id -> latent indices its label reads.
    temporal_locality maps task_id -> (lo, hi) fractions of the clip span;
    when set, that task's own latents render only inside the window (and a
    frame_index label is confined to it).  audio_latents additionally render
    on the audio channel group; audio_only_latents render *only* there.
    """

    n_latents: int
    task_dependency: dict[str, tuple[int, ...]]
    noise_sigma: float = 0.0
    temporal_locality: dict[str, tuple[float, float]] = field(default_factory=dict)
    video_channels: int = 8
    audio_channels: int = 4
    audio_latents: tuple[int, ...] = ()
    audio_only_latents: tuple[int, ...] = ()

    def validate(self, suite: list[TaskSpec] | None = None) -> None:
        """Check internal consistency; with ``suite`` also check coverage."""
        if self.n_latents < 1:
            raise SuiteError("n_latents must be >= 1")
        if self.noise_sigma < 0:
            raise SuiteError("noise_sigma must be >= 0")
        if self.video_channels < 1 or self.audio_channels < 1:
            raise SuiteError("channel counts must be >= 1")
        for task_id, deps in self.task_dependency.items():
            if not deps:
                raise SuiteError(f"{task_id}: every task must depend on >= 1 latent")
            for j in deps:
                if not 0 <= j < self.n_latents:
                    raise SuiteError(f"{task_id}: latent index {j} out of range")
        for task_id, window in self.temporal_locality.items():
            lo, hi = window
            if not (0.0 <= lo < hi <= 1.0):
                raise SuiteError(f"{task_id}: locality window {window} not within [0, 1]")
        for j in tuple(self.audio_latents) + tuple(self.audio_only_latents):
            if not 0 <= j < self.n_latents:
                raise SuiteError(f"audio latent index {j} out of range")
        if suite is not None:
            ids = {s.task_id for s in suite}
            for task_id in self.task_dependency:
                if task_id not in ids:
                    raise SuiteError(f"task_dependency names unknown task {task_id!r}")
            for task_id in self.temporal_locality:
                if task_id not in ids:
                    raise SuiteError(f"temporal_locality names unknown task {task_id!r}")
            for spec in suite:
                if spec.task_id not in self.task_dependency:
                    raise SuiteError(f"task {spec.task_id} missing from task_dependency")

    def to_json(self) -> dict:
        return {
            "n_latents": self.n_latents,
            "task_dependency": {k: list(v) for k, v in self.task_dependency.items()},
            "noise_sigma": self.noise_sigma,
            "temporal_locality": {k: list(v) for k, v in self.temporal_locality.items()},
            "video_channels": self.video_channels,
            "audio_channels": self.audio_channels,
            "audio_latents": list(self.audio_latents),
            "audio_only_latents": list(self.audio_only_latents),
        }

    @staticmethod
    def from_json(doc: dict) -> "SynergySpec":
        return SynergySpec(
            n_latents=int(doc["n_latents"]),
            task_dependency={k: tuple(v) for k, v in doc["task_dependency"].items()},
            noise_sigma=float(doc.get("noise_sigma", 0.0)),
            temporal_locality={k: (float(v[0]), float(v[1])) for k, v in doc.get("temporal_locality", {}).items()},
            video_channels=int(doc.get("video_channels", 8)),
            audio_channels=int(doc.get("audio_channels", 4)),
            audio_latents=tuple(doc.get("audio_latents", ())),
            audio_only_latents=tuple(doc.get("audio_only_latents", ())),
        )


@dataclass
class Sample:
    """One clip: per-modality (frames x channels) arrays plus a label."""

    arrays: dict[str, np.ndarray]
    label: object
    clip_id: str

    def equals(self, other: "Sample") -> bool:
        if self.clip_id != other.clip_id or self.label != other.label:
            return False
        if set(self.arrays) != set(other.arrays):
            return False
        return all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)


@dataclass
class Dataset:
    spec: TaskSpec
    samples: list[Sample]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> list:
        return [s.label for s in self.samples]

    def equals(self, other: "Dataset") -> bool:
        return (
            self.spec == other.spec
            and len(self) == len(other)
            and all(a.equals(b) for a, b in zip(self.samples, other.samples))
        )


# ---------------------------------------------------------------------------
# Suite construction
# ---------------------------------------------------------------------------

def validate_suite(suite: list[TaskSpec], require_diversity: bool = True) -> list[TaskSpec]:
    seen_ids: set[str] = set()
    seen_prompts: set[str] = set()
    for spec in suite:
        if spec.task_id in seen_ids:
            raise SuiteError(f"duplicate task_id {spec.task_id!r}")
        if spec.prompt_token in seen_prompts:
            raise SuiteError(f"duplicate prompt_token {spec.prompt_token!r}")
        seen_ids.add(spec.task_id)
        seen_prompts.add(spec.prompt_token)
    if require_diversity:
        if len(suite) < 3:
            raise SuiteError(f"suite needs >= 3 tasks, got {len(suite)}")
        if len({spec.span_s for spec in suite}) < 2:
            raise SuiteError("suite needs >= 2 distinct spans")
        if len({spec.label_space.kind for spec in suite}) < 2:
            raise SuiteError("suite needs >= 2 distinct label-space kinds")
    return suite


def make_default_suite(config: dict | None = None) -> list[TaskSpec]:
    """Build the 5-task default suite, or the suite described by ``config``.

    ``config`` follows the documented schema: {"tasks": [task docs...]}.
    """
    if config and config.get("tasks"):
        suite = [TaskSpec.from_json(doc) for doc in config["tasks"]]
    else:
        suite = [
            TaskSpec("LOC", "<LOC>", (VIDEO,), 8.0, 2.0, FrameIndexSpace(16), "ego"),
            TaskSpec("SCC", "<SCC>", (VIDEO,), 8.0, 2.0, BinarySpace(), "ego"),
            TaskSpec("REC", "<REC>", (VIDEO,), 8.0, 4.0, CategoricalSpace(8), "ego"),
            TaskSpec("ANT", "<ANT>", (VIDEO,), 16.0, 2.0, SequenceSpace(8, 4), "ego"),
            TaskSpec("TLK", "<TLK>", (VIDEO, AUDIO), 4.0, 4.0, BinarySpace(), "social"),
        ]
    return validate_suite(suite)


def default_synergy() -> SynergySpec:
    """Synergy wiring for the default suite.

    LOC/SCC share latent 0, SCC/REC share latent 1, REC/ANT share latent 2;
    TLK sits apart on latent 4 which also drives the audio channels.
    """
    return SynergySpec(
        n_latents=6,
        task_dependency={
            "LOC": (0,),
            "SCC": (0, 1),
            "REC": (1, 2),
            "ANT": (2, 3),
            "TLK": (4,),
        },
        noise_sigma=0.3,
        audio_latents=(4,),
    )


# ---------------------------------------------------------------------------
# Labels and rendering
# ---------------------------------------------------------------------------

def _quantize(v: float, n: int) -> int:
    """Map v in [-1, 1] to a bin in [0, n)."""
    t = (v + 1.0) / 2.0
    return min(n - 1, max(0, int(np.floor(t * n))))


def _locality_frames(spec: TaskSpec, synergy: SynergySpec) -> tuple[int, int]:
    """The task's render window as a frame range [lo, hi) of its own clip."""
    window = synergy.temporal_locality.get(spec.task_id)
    if window is None:
        return 0, spec.n_frames
    lo = int(round(window[0] * spec.n_frames))
    hi = int(round(window[1] * spec.n_frames))
    hi = max(hi, lo + 1)
    return lo, min(hi, spec.n_frames)


def task_label(spec: TaskSpec, synergy: SynergySpec, u: np.ndarray):
    """Deterministic label of task ``spec`` for latent draw ``u``."""
    deps = synergy.task_dependency[spec.task_id]
    space = spec.label_space
    mean_u = float(np.mean(u[list(deps)]))
    if isinstance(space, BinarySpace):
        return bool(mean_u > 0.0)
    if isinstance(space, CategoricalSpace):
        return _quantize(mean_u, space.n_classes)
    if isinstance(space, FrameIndexSpace):
        lo, hi = _locality_frames(spec, synergy)
        return lo + _quantize(mean_u, hi - lo)
    if isinstance(space, SequenceSpace):
        # Step z reads the dependency latents cyclically and shifts by z so a
        # single shared latent still yields a varying, fully determined word.
        symbols = []
        for z in range(space.horizon):
            v = float(u[deps[z % len(deps)]])
            symbols.append((_quantize(v, space.vocab_size) + z) % space.vocab_size)
        return tuple(symbols)
    raise SuiteError(f"unhandled label space {space!r}")


def _render_clip(spec: TaskSpec, synergy: SynergySpec, u: np.ndarray, label, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Render one clip for ``spec``'s dataset from latent draw ``u``.

    All latents render; the task's own latents honour its locality window.
    A frame_index task renders its own latents as a pulse at the labelled
    frame instead of a constant level, so the label lives purely in *when*,
    not in channel magnitude.
    """
    frames = spec.n_frames
    deps = set(synergy.task_dependency[spec.task_id])
    lo, hi = _locality_frames(spec, synergy)
    pulse_task = isinstance(spec.label_space, FrameIndexSpace)

    video = np.zeros((frames, synergy.video_channels), dtype=np.float64)
    t = np.arange(frames, dtype=np.float64)
    for j in range(synergy.n_latents):
        own = j in deps
        if j in synergy.audio_only_latents:
            continue
        c = j % synergy.video_channels
        if own and pulse_task:
            video[:, c] += PULSE_AMP * np.exp(-((t - float(label)) ** 2) / (2.0 * PULSE_SIGMA**2))
        elif own:
            video[lo:hi, c] += u[j]
        else:
            video[:, c] += u[j]
    arrays = {VIDEO: video}

    if AUDIO in spec.modalities:
        audio = np.zeros((frames, synergy.audio_channels), dtype=np.float64)
        for j in tuple(synergy.audio_latents) + tuple(synergy.audio_only_latents):
            c = j % synergy.audio_channels
            if j in deps:
                audio[lo:hi, c] += u[j]
            else:
                audio[:, c] += u[j]
        arrays[AUDIO] = audio

    if synergy.noise_sigma > 0:
        for key in arrays:
            arrays[key] = arrays[key] + rng.normal(0.0, synergy.noise_sigma, arrays[key].shape)
    return {key: arr.astype(np.float32) for key, arr in arrays.items()}


def generate_dataset(spec: TaskSpec, synergy: SynergySpec, n: int, seed: int) -> Dataset:
    """Generate ``n`` clips for one task; pure function of its arguments."""
    if n < 1:
        raise SuiteError(f"n must be >= 1, got {n}")
    synergy.validate()
    if spec.task_id not in synergy.task_dependency:
        raise SuiteError(f"task {spec.task_id} missing from task_dependency")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        u = rng.uniform(-1.0, 1.0, synergy.n_latents)
        label = task_label(spec, synergy, u)
        arrays = _render_clip(spec, synergy, u, label, rng)
        samples.append(Sample(arrays=arrays, label=label, clip_id=f"{spec.task_id}-s{seed}-{i:05d}"))
    return Dataset(spec=spec, samples=samples, meta={"seed": seed, "n": n})


def split(dataset: Dataset, ratios: tuple[float, float, float], seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic disjoint train/val/test partition."""
    if any(r <= 0 for r in ratios):
        raise SuiteError(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SuiteError(f"ratios must sum to 1, got sum {sum(ratios)}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(ratios[0] * n)
    n_val = int(ratios[1] * n)
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    out = []
    for name, idx in zip(("train", "val", "test"), parts):
        samples = [dataset.samples[i] for i in idx]
        meta = dict(dataset.meta)
        meta["split"] = name
        out.append(Dataset(spec=dataset.spec, samples=samples, meta=meta))
    return tuple(out)


# ---------------------------------------------------------------------------
# Serialization: directory with manifest.json + one stacked blob per modality
# ---------------------------------------------------------------------------

def _label_to_json(label):
    if isinstance(label, tuple):
        return list(label)
    if isinstance(label, (bool, np.bool_)):
        return bool(label)
    return int(label)


def _label_from_json(space, doc):
    if isinstance(space, SequenceSpace):
        return tuple(int(x) for x in doc)
    if isinstance(space, BinarySpace):
        return bool(doc)
    return int(doc)


def save_dataset(dataset: Dataset, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    manifest = {
        "format_version": 1,
        "task": dataset.spec.to_json(),
        "meta": dataset.meta,
        "samples": [
            {"clip_id": s.clip_id, "label": _label_to_json(s.label)} for s in dataset.samples
        ],
        "arrays": {},
        "label_encoding": dataset.spec.label_space.kind,
    }
    for modality in dataset.spec.modalities:
        stacked = np.stack([s.arrays[modality] for s in dataset.samples]).astype(np.float32)
        fname = f"{modality}.egt2"
        with open(os.path.join(path, fname), "wb") as fh:
            fh.write(encode_array(stacked))
        manifest["arrays"][modality] = fname
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_dataset(path: str) -> Dataset:
    mpath = os.path.join(path, "manifest.json")
    if not os.path.exists(mpath):
        raise FormatError("manifest", f"no manifest.json under {path}")
    with open(mpath) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError("manifest", f"manifest.json is not valid JSON ({exc})") from None
    if manifest.get("format_version") != 1:
        raise FormatError("format_version", f"unsupported {manifest.get('format_version')!r}")
    spec = TaskSpec.from_json(manifest["task"])
    stacks = {}
    for modality, fname in manifest["arrays"].items():
        with open(os.path.join(path, fname), "rb") as fh:
            arr, _ = decode_array(fh.read())
        if arr.shape[0] != len(manifest["samples"]):
            raise FormatError("samples", f"{modality}: {arr.shape[0]} rows for {len(manifest['samples'])} samples")
        stacks[modality] = arr
    samples = []
    for i, doc in enumerate(manifest["samples"]):
        arrays = {m: stacks[m][i] for m in stacks}
        label = _label_from_json(spec.label_space, doc["label"])
        samples.append(Sample(arrays=arrays, label=label, clip_id=doc["clip_id"]))
    return Dataset(spec=spec, samples=samples, meta=manifest.get("meta", {}))
