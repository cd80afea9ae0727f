"""Experiment configuration: one strict, versioned JSON document per run.

Unknown keys are rejected with the full field path — a typo should fail
loudly at parse time, never silently fall back to a default.  The parsed
config resolves everything a run needs: suite, generator wiring, per-task
backbone specs, fusion/decoder hyperparameters, data sizing, and the train
section that becomes a TrainConfig.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from . import __version__
from .backbone import BackboneSpec, default_backbones
from .fusion import FusionConfig
from .seqgen import DecoderConfig
from .suite import SynergySpec, TaskSpec, default_synergy, make_default_suite, validate_suite
from .training import TrainConfig, TrainingError

__all__ = [
    "SCHEMA_VERSION",
    "ConfigError",
    "DataConfig",
    "Stage1Config",
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "RunManifest",
]

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``.field`` is the dotted path of the offender."""

    def __init__(self, field_path: str, message: str):
        self.field = field_path
        super().__init__(f"{field_path}: {message}")


def _check_keys(doc: dict, allowed: tuple[str, ...], path: str, required: tuple[str, ...] = ()):
    if not isinstance(doc, dict):
        raise ConfigError(path, f"expected an object, got {type(doc).__name__}")
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}", "unknown key")
    for key in required:
        if key not in doc:
            raise ConfigError(f"{path}.{key}", "required key missing")


def _typed(doc: dict, key: str, types, path: str, default=None):
    if key not in doc:
        return default
    value = doc[key]
    if not isinstance(value, types) or isinstance(value, bool) and bool not in (
        types if isinstance(types, tuple) else (types,)
    ):
        names = "/".join(t.__name__ for t in (types if isinstance(types, tuple) else (types,)))
        raise ConfigError(f"{path}.{key}", f"expected {names}, got {type(doc[key]).__name__}")
    return value


@dataclass(frozen=True)
class DataConfig:
    """How many clips to draw per task and how to split them."""

    n: int = 512
    counts: dict[str, int] = field(default_factory=dict)  # per-task override
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def n_for(self, task_id: str) -> int:
        return self.counts.get(task_id, self.n)


@dataclass(frozen=True)
class Stage1Config:
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 64


@dataclass
class ExperimentConfig:
    version: int
    suite: list[TaskSpec]
    synergy: SynergySpec
    data: DataConfig
    backbones: dict[str, BackboneSpec]
    stage1: Stage1Config
    fusion: FusionConfig
    capture_attention: bool
    decoder: DecoderConfig
    train_doc: dict  # raw train section; resolved per command invocation
    raw: dict  # full resolved snapshot for the manifest

    def train_config(self, variant: str | None = None, seed: int | None = None) -> TrainConfig:
        doc = dict(self.train_doc)
        if variant is not None:
            doc["variant"] = variant
        if "variant" not in doc:
            raise ConfigError("train.variant", "required key missing")
        if seed is not None:
            doc["seed"] = seed
        try:
            return TrainConfig(
                variant=doc["variant"],
                primary=doc.get("primary"),
                tasks=tuple(doc.get("tasks", ())),
                aux=tuple(doc.get("aux", ())),
                transfer_source=doc.get("transfer_source"),
                optimizer=doc.get("optimizer", "adamw"),
                lr=doc.get("lr"),
                weight_decay=float(doc.get("weight_decay", 0.0)),
                batch_size=int(doc.get("batch_size", 32)),
                epochs=int(doc.get("epochs", 20)),
                seed=int(doc.get("seed", 0)),
                stride_s=float(doc.get("stride_s", 8.0)),
                probe_hidden=int(doc.get("probe_hidden", 64)),
                fusion=self.fusion,
                decoder=self.decoder,
                replace_aux_with_primary_copies=bool(doc.get("replace_aux_with_primary_copies", False)),
                temporal_pool_tokens=bool(doc.get("temporal_pool_tokens", False)),
                unfreeze_backbones=bool(doc.get("unfreeze_backbones", False)),
            )
        except TrainingError as exc:
            raise ConfigError("train", str(exc)) from exc


_TOP_KEYS = ("version", "suite", "synergy", "data", "backbones", "stage1", "fusion", "decoder", "train")
_TASK_KEYS = ("task_id", "prompt_token", "modalities", "span_s", "frame_rate_hz", "label_space", "cluster_id")
_LABEL_KEYS = ("kind", "n_frames", "n_classes", "vocab_size", "horizon")
_SYNERGY_KEYS = (
    "n_latents", "task_dependency", "noise_sigma", "temporal_locality",
    "video_channels", "audio_channels", "audio_latents", "audio_only_latents",
)
_DATA_KEYS = ("n", "counts", "ratios")
_BACKBONE_KEYS = ("arch", "layers", "width", "downsample")
_STAGE1_KEYS = ("lr", "epochs", "batch_size")
_FUSION_KEYS = ("width", "heads", "depth", "proj_bias", "ff_mult", "pool_tokens", "capture_attention")
_DECODER_KEYS = ("depth", "heads", "ff_mult", "max_len")
_TRAIN_KEYS = (
    "variant", "primary", "tasks", "aux", "transfer_source", "optimizer", "lr",
    "weight_decay", "batch_size", "epochs", "seed", "stride_s", "probe_hidden",
    "replace_aux_with_primary_copies", "temporal_pool_tokens", "unfreeze_backbones",
)


def parse_config(doc: dict) -> ExperimentConfig:
    _check_keys(doc, _TOP_KEYS, "config", required=("version",))
    version = doc["version"]
    if version != SCHEMA_VERSION:
        raise ConfigError("config.version", f"schema version {version!r} not supported (want {SCHEMA_VERSION})")

    suite_doc = doc.get("suite", {})
    _check_keys(suite_doc, ("tasks",), "suite")
    for i, task_doc in enumerate(suite_doc.get("tasks", [])):
        _check_keys(
            task_doc, _TASK_KEYS, f"suite.tasks[{i}]",
            required=("task_id", "prompt_token", "modalities", "span_s", "frame_rate_hz", "label_space"),
        )
        _check_keys(task_doc["label_space"], _LABEL_KEYS, f"suite.tasks[{i}].label_space", required=("kind",))
    try:
        suite = make_default_suite(suite_doc)
        validate_suite(suite)
    except Exception as exc:
        raise ConfigError("suite", str(exc)) from exc

    if "synergy" in doc:
        _check_keys(doc["synergy"], _SYNERGY_KEYS, "synergy", required=("n_latents", "task_dependency"))
        try:
            synergy = SynergySpec.from_json(doc["synergy"])
        except Exception as exc:
            raise ConfigError("synergy", str(exc)) from exc
    else:
        synergy = default_synergy()
    try:
        synergy.validate(suite)
    except Exception as exc:
        raise ConfigError("synergy", str(exc)) from exc

    data_doc = doc.get("data", {})
    _check_keys(data_doc, _DATA_KEYS, "data")
    suite_ids = {s.task_id for s in suite}
    counts = {}
    for task_id, n in _typed(data_doc, "counts", dict, "data", {}).items():
        if task_id not in suite_ids:
            raise ConfigError(f"data.counts.{task_id}", "unknown task")
        counts[task_id] = int(n)
    ratios = tuple(_typed(data_doc, "ratios", (list, tuple), "data", (0.7, 0.15, 0.15)))
    if len(ratios) != 3:
        raise ConfigError("data.ratios", f"expected 3 ratios, got {len(ratios)}")
    data = DataConfig(n=int(_typed(data_doc, "n", int, "data", 512)), counts=counts, ratios=ratios)
    if data.n < 1 or any(v < 1 for v in counts.values()):
        raise ConfigError("data.n", "sample counts must be >= 1")

    backbones = default_backbones(suite, synergy)
    for task_id, bb_doc in doc.get("backbones", {}).items():
        if task_id not in suite_ids:
            raise ConfigError(f"backbones.{task_id}", "unknown task")
        _check_keys(bb_doc, _BACKBONE_KEYS, f"backbones.{task_id}")
        try:
            backbones[task_id] = dataclasses.replace(backbones[task_id], **bb_doc)
        except Exception as exc:
            raise ConfigError(f"backbones.{task_id}", str(exc)) from exc

    stage1_doc = doc.get("stage1", {})
    _check_keys(stage1_doc, _STAGE1_KEYS, "stage1")
    stage1 = Stage1Config(
        lr=float(_typed(stage1_doc, "lr", (int, float), "stage1", 1e-3)),
        epochs=int(_typed(stage1_doc, "epochs", int, "stage1", 20)),
        batch_size=int(_typed(stage1_doc, "batch_size", int, "stage1", 64)),
    )
    if stage1.epochs < 1 or stage1.batch_size < 1 or stage1.lr <= 0:
        raise ConfigError("stage1", "lr must be > 0 and epochs/batch_size >= 1")

    fusion_doc = dict(doc.get("fusion", {}))
    _check_keys(fusion_doc, _FUSION_KEYS, "fusion")
    capture = bool(fusion_doc.pop("capture_attention", False))
    try:
        fusion = FusionConfig.from_json(fusion_doc)
    except Exception as exc:
        raise ConfigError("fusion", str(exc)) from exc

    decoder_doc = doc.get("decoder", {})
    _check_keys(decoder_doc, _DECODER_KEYS, "decoder")
    try:
        decoder = DecoderConfig.from_json(decoder_doc)
    except Exception as exc:
        raise ConfigError("decoder", str(exc)) from exc

    train_doc = doc.get("train", {})
    _check_keys(train_doc, _TRAIN_KEYS, "train")
    for key in ("primary", "transfer_source"):
        value = train_doc.get(key)
        if value is not None and value not in suite_ids:
            raise ConfigError(f"train.{key}", f"unknown task {value!r}")
    for key in ("tasks", "aux"):
        for t in train_doc.get(key, ()):
            if t not in suite_ids:
                raise ConfigError(f"train.{key}", f"unknown task {t!r}")

    resolved = {
        "version": version,
        "suite": {"tasks": [s.to_json() for s in suite]},
        "synergy": synergy.to_json(),
        "data": {"n": data.n, "counts": dict(sorted(counts.items())), "ratios": list(ratios)},
        "backbones": {t: backbones[t].to_json() for t in sorted(backbones)},
        "stage1": {"lr": stage1.lr, "epochs": stage1.epochs, "batch_size": stage1.batch_size},
        "fusion": {**fusion.to_json(), "capture_attention": capture},
        "decoder": decoder.to_json(),
        "train": dict(train_doc),
    }
    return ExperimentConfig(
        version=version,
        suite=suite,
        synergy=synergy,
        data=data,
        backbones=backbones,
        stage1=stage1,
        fusion=fusion,
        capture_attention=capture,
        decoder=decoder,
        train_doc=dict(train_doc),
        raw=resolved,
    )


def load_config(path: str) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError("config", f"file not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON in {path}: {exc}") from exc
    return parse_config(doc)


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    """Everything needed to audit or resume a run, written before any
    checkpoint so a crashed run still identifies its inputs."""

    command: str
    config: dict
    seed: int
    seeds: dict[str, int] = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    artifacts: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)  # wall clock etc.; not replayed
    tool_version: str = __version__

    def to_json(self) -> str:
        doc = {
            "kind": "run_manifest",
            "tool_version": self.tool_version,
            "command": self.command,
            "seed": self.seed,
            "seeds": dict(sorted(self.seeds.items())),
            "config": self.config,
            "inputs": dict(sorted(self.inputs.items())),
            "artifacts": list(self.artifacts),
            "extra": self.extra,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def write(self, run_dir: str) -> str:
        path = os.path.join(run_dir, "manifest.json")
        os.makedirs(run_dir, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(self.to_json())
        return path

    @staticmethod
    def read(run_dir: str) -> "RunManifest":
        path = os.path.join(run_dir, "manifest.json")
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("kind") != "run_manifest":
            raise ConfigError("manifest", f"{path} is not a run manifest")
        return RunManifest(
            command=doc["command"],
            config=doc["config"],
            seed=int(doc["seed"]),
            seeds={k: int(v) for k, v in doc.get("seeds", {}).items()},
            inputs=dict(doc.get("inputs", {})),
            artifacts=list(doc.get("artifacts", [])),
            extra=dict(doc.get("extra", {})),
            tool_version=doc.get("tool_version", "unknown"),
        )
