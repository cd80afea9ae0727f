"""Training orchestration: stage I, both translator variants, baselines.

Stage II never touches backbone weights (unless the unfreeze ablation is on),
so per-task features over a whole dataset are precomputed once and the
training loops run over feature tensors.  The task-general variant draws one
batch per task each iteration, sums the per-task losses, and performs exactly
one optimizer step — by linearity this equals accumulating the per-task
gradients.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from . import container
from .backbone import (
    AdaptedBatch,
    BackboneSpec,
    Excluded,
    FrozenBackbone,
    TaskModel,
    adapt_dataset,
    head_loss,
    head_predict,
    head_scores,
    labels_to_target,
    make_head,
    token_times_s,
    train_task_model,
)
from .fusion import (
    FeaturePart,
    FusionConfig,
    TranslatorS,
    total_parameter_count,
    trainable_parameter_count,
)
from .metrics import MetricReport, accuracy, average_precision, ed_at_z, loc_error_s
from .seeding import derive_seed
from .seqgen import (
    DecoderConfig,
    Incorrect,
    TranslatorG,
    Vocabulary,
    build_vocab,
    detokenize,
    seq_loss,
    tokenize,
)
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
    "TrainingError",
    "IncompatibleError",
    "TrainConfig",
    "run_stage1",
    "train_egot2s",
    "train_egot2g",
    "run_baseline",
    "evaluate_translator_s",
    "evaluate_translator_g",
    "precompute_parts",
    "save_translator",
    "load_translator",
    "ProbeModel",
    "SharedTrunkMTL",
]

BASELINE_VARIANTS = ("finetune", "transfer", "late_fusion", "mtl_hard_share")
VARIANTS = ("egot2s", "egot2g") + BASELINE_VARIANTS


class TrainingError(ValueError):
    """Configuration or usage problem detected before/while training."""


class IncompatibleError(TrainingError):
    """Inputs that cannot be combined (arch mismatch, task-id mismatch)."""


@dataclass
class TrainConfig:
    variant: str
    primary: str | None = None  # egot2s + baselines
    tasks: tuple[str, ...] = ()  # egot2g / mtl task set
    aux: tuple[str, ...] = ()  # auxiliary tasks (egot2s, late_fusion)
    transfer_source: str | None = None  # transfer baseline
    optimizer: str = "adamw"
    lr: float | None = None  # default depends on variant
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    stride_s: float = 8.0
    probe_hidden: int = 64
    fusion: FusionConfig = field(default_factory=FusionConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    replace_aux_with_primary_copies: bool = False
    temporal_pool_tokens: bool = False
    unfreeze_backbones: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise TrainingError(f"unknown variant {self.variant!r}")
        if self.variant in ("egot2s",) + BASELINE_VARIANTS and self.variant != "mtl_hard_share":
            if not self.primary:
                raise TrainingError(f"{self.variant} requires exactly one primary task")
        if self.variant == "egot2g" and len(self.tasks) < 2:
            raise TrainingError("egot2g requires >= 2 tasks")
        if self.variant == "mtl_hard_share" and len(self.tasks) < 2:
            raise TrainingError("mtl_hard_share requires >= 2 tasks")
        if self.variant == "transfer" and not self.transfer_source:
            raise TrainingError("transfer requires transfer_source")
        flags = (
            self.replace_aux_with_primary_copies,
            self.temporal_pool_tokens,
            self.unfreeze_backbones,
        )
        if any(flags) and self.variant not in ("egot2s", "egot2g"):
            raise TrainingError("ablation flags are only valid for egot2s/egot2g")
        if self.optimizer != "adamw":
            raise TrainingError(f"unsupported optimizer {self.optimizer!r}")

    @property
    def effective_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-4 if self.variant == "egot2g" else 1e-3


# ---------------------------------------------------------------------------
# Stage I
# ---------------------------------------------------------------------------

def run_stage1(
    suite: list[TaskSpec],
    backbone_specs: dict[str, BackboneSpec],
    datasets: dict[str, tuple[Dataset, Dataset]],
    seed: int,
    *,
    lr: float = 1e-3,
    epochs: int = 20,
    batch_size: int = 64,
) -> dict[str, tuple[TaskModel, dict]]:
    """Train every task-specific model on its own dataset."""
    out = {}
    for spec in suite:
        if spec.task_id not in datasets:
            raise TrainingError(f"no dataset for task {spec.task_id}")
        train_set, val_set = datasets[spec.task_id]
        model, meta = train_task_model(
            spec,
            backbone_specs[spec.task_id],
            train_set,
            val_set,
            lr=lr,
            epochs=epochs,
            batch_size=batch_size,
            seed=derive_seed(seed, "stage1", spec.task_id),
        )
        out[spec.task_id] = (model, meta)
    return out


# ---------------------------------------------------------------------------
# Feature precomputation
# ---------------------------------------------------------------------------

def precompute_parts(
    dataset: Dataset,
    backbones: dict[str, FrozenBackbone],
    participants: list[str],
    stride_s: float,
) -> tuple[list[FeaturePart], list[str]]:
    """Adapt + extract features of a whole dataset for each participant.

    Returns batched FeatureParts (feats shaped (n, W*T_k, D_k)) in participant
    order, plus the list of tasks dropped by the exclusion rule.
    """
    parts, excluded = [], []
    for task_id in participants:
        fb = backbones[task_id]
        adapted = adapt_dataset(dataset, fb.spec, stride_s)
        if isinstance(adapted, Excluded):
            excluded.append(task_id)
            continue
        feats = fb.extract_features(adapted)
        times = token_times_s(fb.spec, adapted.window_starts_s)
        windows = [w for w in range(len(adapted.windows)) for _ in range(fb.spec.n_tokens)]
        parts.append(FeaturePart(task_id, feats, times, windows))
    return parts, excluded


def _slice_parts(parts: list[FeaturePart], idx: torch.Tensor) -> list[FeaturePart]:
    return [FeaturePart(p.task_id, p.feats[idx], p.times_s, p.windows) for p in parts]


def _adapted_cache(dataset: Dataset, backbones, participants, stride_s):
    """Raw adapted windows (no feature extraction) for the unfreeze ablation."""
    cache, excluded = {}, []
    for task_id in participants:
        adapted = adapt_dataset(dataset, backbones[task_id].spec, stride_s)
        if isinstance(adapted, Excluded):
            excluded.append(task_id)
        else:
            cache[task_id] = adapted
    return cache, excluded


def _parts_from_models(cache, models, idx=None):
    from .backbone import _window_features  # in-graph extraction

    parts = []
    for task_id, adapted in cache.items():
        sub = adapted
        if idx is not None:
            sub = AdaptedBatch(
                windows=[{m: w[m][idx] for m in w} for w in adapted.windows],
                window_starts_s=adapted.window_starts_s,
                video_pathway_only=adapted.video_pathway_only,
            )
        model = models[task_id].model if isinstance(models[task_id], FrozenBackbone) else models[task_id]
        feats = _window_features(model, sub)
        spec = model.spec
        times = token_times_s(spec, adapted.window_starts_s)
        windows = [w for w in range(len(adapted.windows)) for _ in range(spec.n_tokens)]
        parts.append(FeaturePart(task_id, feats, times, windows))
    return parts


# ---------------------------------------------------------------------------
# EgoT2-s
# ---------------------------------------------------------------------------

def _canonical_metrics(report: MetricReport, spec: TaskSpec, preds, labels, scores):
    report.add(spec.task_id, "accuracy", accuracy(preds, labels))
    space = spec.label_space
    if isinstance(space, FrameIndexSpace):
        report.add(
            spec.task_id,
            "loc_error_s",
            loc_error_s(preds, labels, spec.frame_rate_hz, space.n_frames),
        )
    if isinstance(space, SequenceSpace):
        report.add(spec.task_id, "ed_at_z", ed_at_z(preds, labels, space.horizon))
    if isinstance(space, BinarySpace) and scores is not None:
        report.add(spec.task_id, "mAP", average_precision(scores, [bool(l) for l in labels]))


def train_egot2s(
    config: TrainConfig,
    backbones: dict[str, FrozenBackbone | TaskModel],
    train_set: Dataset,
    val_set: Dataset,
    *,
    copy_recipe: dict | None = None,
) -> tuple[TranslatorS, MetricReport, dict]:
    """Stage-II training of the task-specific translator.

    Only projections, fusion encoder, and head are optimized; the exclusion
    rule drops auxiliaries whose span exceeds the primary's.  With
    ``replace_aux_with_primary_copies`` the auxiliary slots are filled by
    re-trained copies of the primary backbone that differ only by init seed
    (``copy_recipe`` supplies the stage-I training arguments).
    """
    t0 = time.monotonic()
    if config.variant != "egot2s":
        raise TrainingError(f"train_egot2s got variant {config.variant!r}")
    primary_spec = train_set.spec
    if primary_spec.task_id != config.primary:
        raise IncompatibleError(f"dataset is {primary_spec.task_id}, config.primary is {config.primary}")
    if config.primary not in backbones:
        raise TrainingError(f"no backbone for primary task {config.primary}")

    participants = [config.primary] + [t for t in config.aux if t != config.primary]
    pool = dict(backbones)

    if config.replace_aux_with_primary_copies:
        if copy_recipe is None:
            raise TrainingError("replace_aux_with_primary_copies needs a copy_recipe")
        participants = [config.primary]
        base_spec = pool[config.primary].spec
        for i, _ in enumerate(t for t in config.aux if t != config.primary):
            copy_id = f"{config.primary}#copy{i + 1}"
            model, _ = train_task_model(
                primary_spec,
                base_spec,
                copy_recipe["train_set"],
                None,
                lr=copy_recipe.get("lr", 1e-3),
                epochs=copy_recipe.get("epochs", config.epochs),
                batch_size=copy_recipe.get("batch_size", 64),
                seed=derive_seed(config.seed, "aux-copy", i),
            )
            pool[copy_id] = FrozenBackbone(model)
            participants.append(copy_id)

    for t in participants:
        if t not in pool:
            raise TrainingError(f"no backbone for auxiliary task {t}")

    frozen = {
        t: (pool[t] if isinstance(pool[t], FrozenBackbone) else FrozenBackbone(pool[t]))
        for t in participants
    }

    if config.unfreeze_backbones:
        # Features must be recomputed in-graph every step.
        models = {t: frozen[t].model for t in participants}
        for m in models.values():
            for p in m.parameters():
                p.requires_grad_(True)
            m.train()
        cache_train, excluded = _adapted_cache(train_set, frozen, participants, config.stride_s)
        cache_val, _ = _adapted_cache(val_set, frozen, participants, config.stride_s)
        kept = [t for t in participants if t not in excluded]
    else:
        parts_train, excluded = precompute_parts(train_set, frozen, participants, config.stride_s)
        parts_val, _ = precompute_parts(val_set, frozen, participants, config.stride_s)
        kept = [p.task_id for p in parts_train]

    if config.primary in excluded:
        raise TrainingError("primary backbone cannot consume its own clips")
    if not kept:
        raise TrainingError("no usable tasks: every participant was excluded")

    fusion_cfg = replace(config.fusion, pool_tokens=config.temporal_pool_tokens or config.fusion.pool_tokens)
    widths = {t: frozen[t].spec.width for t in kept}
    torch.manual_seed(derive_seed(config.seed, "egot2s", config.primary))
    translator = TranslatorS(primary_spec, widths, fusion_cfg)

    params = list(translator.parameters())
    if config.unfreeze_backbones:
        for t in kept:
            params += [p for p in models[t].parameters()]
    opt = torch.optim.AdamW(params, lr=config.effective_lr, weight_decay=config.weight_decay)

    space = primary_spec.label_space
    target = labels_to_target(space, train_set.labels())
    rng = np.random.default_rng(derive_seed(config.seed, "egot2s-batches", config.primary))
    n = len(train_set)
    loss_curve = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[lo : lo + config.batch_size].copy())
            if config.unfreeze_backbones:
                batch_parts = _parts_from_models(cache_train, models, idx)
            else:
                batch_parts = _slice_parts(parts_train, idx)
            logits, _, _ = translator(batch_parts)
            loss = head_loss(space, logits, target[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
        loss_curve.append(float(np.mean(epoch_losses)))

    translator.eval()
    if config.unfreeze_backbones:
        parts_val = _parts_from_models(cache_val, models)
        parts_val = [FeaturePart(p.task_id, p.feats.detach(), p.times_s, p.windows) for p in parts_val]
    preds, scores = _predict_s(translator, parts_val, space)
    report = MetricReport(
        trainable_params=trainable_parameter_count(translator)
        + (sum(total_parameter_count(models[t]) for t in kept) if config.unfreeze_backbones else 0),
        total_params=trainable_parameter_count(translator)
        + sum(total_parameter_count(frozen[t].model) for t in kept),
    )
    _canonical_metrics(report, primary_spec, preds, val_set.labels(), scores)
    report.extra = {
        "variant": "egot2s",
        "primary": config.primary,
        "participants": kept,
        "excluded": excluded,
        "loss_curve": loss_curve,
        "param_split": {
            "projections": sum(total_parameter_count(m) for m in translator.projections.values()),
            "encoder": total_parameter_count(translator.encoder),
            "head": total_parameter_count(translator.head),
        },
    }
    report.wall_clock_s = time.monotonic() - t0
    details = {
        "excluded": excluded,
        "participants": kept,
        "widths": widths,
        "frozen": {t: frozen[t] for t in kept},
    }
    return translator, report, details


def _predict_s(translator: TranslatorS, parts_val: list[FeaturePart], space, batch_size: int = 256):
    n = parts_val[0].feats.shape[0]
    preds, scores = [], []
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            idx = torch.arange(lo, min(lo + batch_size, n))
            logits, _, _ = translator(_slice_parts(parts_val, idx))
            preds.extend(head_predict(space, logits))
            s = head_scores(space, logits)
            if s is not None:
                scores.extend(s)
    return preds, (scores if scores else None)


def evaluate_translator_s(
    translator: TranslatorS,
    backbones: dict[str, FrozenBackbone],
    val_set: Dataset,
    stride_s: float = 8.0,
) -> MetricReport:
    if val_set.spec.task_id != translator.primary.task_id:
        raise IncompatibleError(
            f"checkpoint is for {translator.primary.task_id}, dataset is {val_set.spec.task_id}"
        )
    parts, _ = precompute_parts(val_set, backbones, translator.participants, stride_s)
    preds, scores = _predict_s(translator, parts, translator.primary.label_space)
    report = MetricReport(
        trainable_params=trainable_parameter_count(translator),
        total_params=trainable_parameter_count(translator)
        + sum(total_parameter_count(backbones[t].model) for t in translator.participants),
    )
    _canonical_metrics(report, translator.primary, preds, val_set.labels(), scores)
    report.extra = {"variant": "egot2s", "primary": translator.primary.task_id}
    return report


# ---------------------------------------------------------------------------
# EgoT2-g
# ---------------------------------------------------------------------------

def _g_participants(task: TaskSpec, suite: list[TaskSpec], backbones) -> list[str]:
    """Backbones usable when ``task`` is the primary: span <= task's span."""
    out = []
    for spec in suite:
        bb = backbones[spec.task_id]
        if bb.spec.span_s <= task.span_s + 1e-9:
            out.append(spec.task_id)
    return out


class _CyclingSampler:
    """Yields per-iteration index batches, reshuffling whenever exhausted."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next_batch(self) -> np.ndarray:
        if self.pos + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        out = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return out


def train_egot2g(
    config: TrainConfig,
    suite: list[TaskSpec],
    backbones: dict[str, FrozenBackbone],
    datasets: dict[str, tuple[Dataset, Dataset]],
) -> tuple[TranslatorG, MetricReport, dict]:
    """Joint training of the task-general translator over all tasks.

    Every iteration draws one batch per task, computes each task's weighted
    sequence loss, and applies their sum in a single optimizer step.
    """
    t0 = time.monotonic()
    if config.variant != "egot2g":
        raise TrainingError(f"train_egot2g got variant {config.variant!r}")
    by_id = {s.task_id: s for s in suite}
    for t in config.tasks:
        if t not in by_id:
            raise TrainingError(f"unknown task {t!r}")
        if t not in datasets:
            raise TrainingError(f"no dataset for task {t}")
        if t not in backbones:
            raise TrainingError(f"no backbone for task {t}")
    tasks = [s.task_id for s in suite if s.task_id in set(config.tasks)]
    vocab = build_vocab([by_id[t] for t in tasks])

    # Per-primary feature banks; participation follows the span-exclusion rule.
    banks = {}
    for t in tasks:
        train_set, val_set = datasets[t]
        participants = _g_participants(by_id[t], [by_id[x] for x in tasks], backbones)
        parts_train, excl = precompute_parts(train_set, backbones, participants, config.stride_s)
        parts_val, _ = precompute_parts(val_set, backbones, participants, config.stride_s)
        tgt = _target_tensor(vocab, by_id[t], train_set.labels())
        banks[t] = {
            "parts_train": parts_train,
            "parts_val": parts_val,
            "targets": tgt,
            "excluded": excl,
            "n": len(train_set),
        }

    widths = {t: backbones[t].spec.width for t in tasks}
    fusion_cfg = replace(config.fusion, pool_tokens=config.temporal_pool_tokens or config.fusion.pool_tokens)
    torch.manual_seed(derive_seed(config.seed, "egot2g"))
    model = TranslatorG(vocab, widths, fusion_cfg, config.decoder)
    opt = torch.optim.AdamW(model.parameters(), lr=config.effective_lr, weight_decay=config.weight_decay)

    samplers = {
        t: _CyclingSampler(
            banks[t]["n"], config.batch_size, np.random.default_rng(derive_seed(config.seed, "egot2g-batches", t))
        )
        for t in tasks
    }
    iters_per_epoch = max(int(np.ceil(banks[t]["n"] / samplers[t].batch_size)) for t in tasks)
    loss_curves = {t: [] for t in tasks}
    for _ in range(config.epochs):
        epoch_losses = {t: [] for t in tasks}
        for _ in range(iters_per_epoch):
            total = None
            opt.zero_grad()
            for t in tasks:
                idx = torch.from_numpy(samplers[t].next_batch().copy())
                parts = _slice_parts(banks[t]["parts_train"], idx)
                ids, weights = banks[t]["targets"]
                loss_t = model.loss(parts, ids[idx], weights[idx])
                epoch_losses[t].append(float(loss_t.detach()))
                total = loss_t if total is None else total + loss_t
            total.backward()
            opt.step()
        for t in tasks:
            loss_curves[t].append(float(np.mean(epoch_losses[t])))

    model.eval()
    report = MetricReport(
        trainable_params=trainable_parameter_count(model),
        total_params=trainable_parameter_count(model)
        + sum(total_parameter_count(backbones[t].model) for t in tasks),
    )
    valid_fraction = {}
    for t in tasks:
        preds, valid = _generate_predictions(model, by_id[t], banks[t]["parts_val"])
        labels = datasets[t][1].labels()
        _canonical_metrics(report, by_id[t], preds, labels, scores=None)
        valid_fraction[t] = valid
    report.extra = {
        "variant": "egot2g",
        "tasks": tasks,
        "excluded": {t: banks[t]["excluded"] for t in tasks},
        "loss_curves": loss_curves,
        "valid_fraction": valid_fraction,
    }
    report.wall_clock_s = time.monotonic() - t0
    details = {"vocab": vocab, "widths": widths, "tasks": tasks}
    return model, report, details


def _target_tensor(vocab: Vocabulary, spec: TaskSpec, labels: list):
    seqs = [tokenize(vocab, spec, lab) for lab in labels]
    ids = torch.tensor([s.ids for s in seqs], dtype=torch.long)
    weights = torch.tensor([s.weights for s in seqs], dtype=torch.float32)
    return ids, weights


def _generate_predictions(model: TranslatorG, spec: TaskSpec, parts_val, batch_size: int = 256):
    n = parts_val[0].feats.shape[0]
    space = spec.label_space
    max_len = (space.horizon if isinstance(space, SequenceSpace) else 1) + 2
    preds, n_valid = [], 0
    with torch.no_grad():
        for lo in range(0, n, batch_size):
            idx = torch.arange(lo, min(lo + batch_size, n))
            rows = model.generate_ids(_slice_parts(parts_val, idx), spec.task_id, max_len=max_len)
            for row in rows:
                lab = detokenize(model.vocab, spec, row)
                preds.append(lab)
                n_valid += int(not isinstance(lab, Incorrect))
    return preds, n_valid / n


def evaluate_translator_g(
    model: TranslatorG,
    suite: list[TaskSpec],
    backbones: dict[str, FrozenBackbone],
    datasets: dict[str, Dataset],
    stride_s: float = 8.0,
) -> MetricReport:
    by_id = {s.task_id: s for s in suite}
    for t in datasets:
        if t not in by_id or t not in model.vocab.prompt_ids:
            raise IncompatibleError(f"dataset task {t!r} unknown to this checkpoint")
    # fuse only tasks the checkpoint holds projections for, as at train time
    candidates = [s for s in suite if s.task_id in set(model.participants)]
    report = MetricReport(
        trainable_params=trainable_parameter_count(model),
        total_params=trainable_parameter_count(model)
        + sum(total_parameter_count(backbones[t].model) for t in datasets),
    )
    valid_fraction = {}
    for t, val_set in datasets.items():
        participants = _g_participants(by_id[t], candidates, backbones)
        parts, _ = precompute_parts(val_set, backbones, participants, stride_s)
        preds, valid = _generate_predictions(model, by_id[t], parts)
        _canonical_metrics(report, by_id[t], preds, val_set.labels(), scores=None)
        valid_fraction[t] = valid
    report.extra = {"variant": "egot2g", "valid_fraction": valid_fraction}
    return report


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

class ProbeModel(nn.Module):
    """Small MLP head over frozen features (finetune/transfer/late-fusion).

    For frame_index targets with one feature row per frame the probe scores
    each frame; otherwise it pools over time and maps to the full label space.
    """

    def __init__(self, space, in_dim: int, n_tokens: int, hidden: int, pool: bool = False):
        super().__init__()
        self.space = space
        self.pool = pool or not isinstance(space, FrameIndexSpace)
        self.per_frame = isinstance(space, FrameIndexSpace) and not pool and n_tokens == space.n_frames
        if isinstance(space, FrameIndexSpace):
            out = 1 if self.per_frame else space.n_frames
        elif isinstance(space, BinarySpace):
            out = 2
        elif isinstance(space, CategoricalSpace):
            out = space.n_classes
        elif isinstance(space, SequenceSpace):
            out = space.horizon * space.vocab_size
        else:
            raise TrainingError(f"unhandled label space {space!r}")
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if self.per_frame:
            return self.net(feats).squeeze(-1)
        logits = self.net(feats.mean(dim=-2))
        if isinstance(self.space, SequenceSpace):
            return logits.view(-1, self.space.horizon, self.space.vocab_size)
        return logits


class SharedTrunkMTL(nn.Module):
    """Hard parameter sharing: one backbone trunk + per-task heads."""

    def __init__(self, tasks: dict[str, TaskSpec], trunk_spec: BackboneSpec):
        super().__init__()
        first = next(iter(tasks.values()))
        self.trunk = TaskModel(first, replace(trunk_spec, task_id=first.task_id))
        self.trunk.head = nn.Identity()  # heads live per task below
        self.heads = nn.ModuleDict({t: make_head(s.label_space, trunk_spec.width) for t, s in tasks.items()})
        self.tasks = tasks

    def forward(self, task_id: str, video: torch.Tensor, audio: torch.Tensor | None = None):
        h = self.trunk.features(video, audio)
        space = self.tasks[task_id].label_space
        if isinstance(space, FrameIndexSpace):
            return self.heads[task_id](h).squeeze(-1)
        logits = self.heads[task_id](h.mean(dim=1))
        if isinstance(space, SequenceSpace):
            return logits.view(-1, space.horizon, space.vocab_size)
        return logits


def _probe_parts(config, backbones, train_set, val_set):
    """Feature sources per baseline variant."""
    primary = config.primary
    if config.variant == "finetune":
        sources = [primary]
    elif config.variant == "transfer":
        sources = [config.transfer_source]
    else:  # late_fusion
        sources = [primary] + [t for t in config.aux if t != primary]
    for t in sources:
        if t not in backbones:
            raise TrainingError(f"no backbone for task {t}")
    parts_train, excl = precompute_parts(train_set, backbones, sources, config.stride_s)
    parts_val, _ = precompute_parts(val_set, backbones, sources, config.stride_s)
    if not parts_train:
        raise TrainingError(f"all feature sources excluded: {excl}")
    return parts_train, parts_val, excl


def run_baseline(
    config: TrainConfig,
    backbones: dict[str, FrozenBackbone],
    train_set: Dataset | dict[str, tuple[Dataset, Dataset]],
    val_set: Dataset | None = None,
    backbone_specs: dict[str, BackboneSpec] | None = None,
    suite: list[TaskSpec] | None = None,
) -> tuple[nn.Module, MetricReport, dict]:
    if config.variant == "mtl_hard_share":
        return _run_mtl(config, train_set, backbone_specs, suite)
    t0 = time.monotonic()
    if val_set is None:
        raise TrainingError(f"{config.variant} needs a validation set")
    primary_spec = train_set.spec
    if primary_spec.task_id != config.primary:
        raise IncompatibleError(f"dataset is {primary_spec.task_id}, config.primary is {config.primary}")
    parts_train, parts_val, excl = _probe_parts(config, backbones, train_set, val_set)
    space = primary_spec.label_space

    if config.variant == "late_fusion":
        # Temporally pooled concatenation across sources.
        def fuse(parts):
            return torch.cat([p.feats.mean(dim=-2) for p in parts], dim=-1)[:, None, :]

        feats_train = fuse(parts_train)
        feats_val = fuse(parts_val)
        in_dim = feats_train.shape[-1]
        n_tokens = 1
        pool = True
    else:
        feats_train = parts_train[0].feats
        feats_val = parts_val[0].feats
        in_dim = feats_train.shape[-1]
        n_tokens = feats_train.shape[-2]
        pool = False

    torch.manual_seed(derive_seed(config.seed, config.variant, config.primary))
    probe = ProbeModel(space, in_dim, n_tokens, config.probe_hidden, pool=pool)
    opt = torch.optim.AdamW(probe.parameters(), lr=config.effective_lr, weight_decay=config.weight_decay)
    target = labels_to_target(space, train_set.labels())
    rng = np.random.default_rng(derive_seed(config.seed, "baseline-batches", config.variant, config.primary))
    n = feats_train.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[lo : lo + config.batch_size].copy())
            loss = head_loss(space, probe(feats_train[idx]), target[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    probe.eval()
    with torch.no_grad():
        logits = probe(feats_val)
        preds = head_predict(space, logits)
        scores = head_scores(space, logits)
    report = MetricReport(
        trainable_params=trainable_parameter_count(probe),
        total_params=trainable_parameter_count(probe)
        + sum(total_parameter_count(backbones[p.task_id].model) for p in parts_train),
    )
    _canonical_metrics(report, primary_spec, preds, val_set.labels(), scores)
    report.extra = {
        "variant": config.variant,
        "primary": config.primary,
        "sources": [p.task_id for p in parts_train],
        "excluded": excl,
    }
    report.wall_clock_s = time.monotonic() - t0
    return probe, report, {"excluded": excl}


def _run_mtl(config, datasets, backbone_specs, suite):
    """Hard parameter sharing over tasks with identical backbone arch."""
    t0 = time.monotonic()
    if suite is None or backbone_specs is None:
        raise TrainingError("mtl_hard_share needs suite and backbone_specs")
    by_id = {s.task_id: s for s in suite}
    tasks = [s.task_id for s in suite if s.task_id in set(config.tasks)]
    for t in config.tasks:
        if t not in by_id:
            raise TrainingError(f"unknown task {t!r}")
        if t not in datasets:
            raise TrainingError(f"no dataset for task {t}")
        if t not in backbone_specs:
            raise TrainingError(f"no backbone spec for task {t}")
    ref = backbone_specs[tasks[0]]
    arch_fields = ("arch", "layers", "width", "span_s", "frame_rate_hz", "modalities",
                   "video_channels", "audio_channels", "downsample")
    for t in tasks[1:]:
        spec = backbone_specs[t]
        diffs = [f for f in arch_fields if getattr(spec, f) != getattr(ref, f)]
        if diffs:
            raise IncompatibleError(
                f"mtl_hard_share needs identical backbone archs; {t} differs from {tasks[0]} on {diffs}"
            )
    torch.manual_seed(derive_seed(config.seed, "mtl"))
    model = SharedTrunkMTL({t: by_id[t] for t in tasks}, ref)
    opt = torch.optim.AdamW(model.parameters(), lr=config.effective_lr, weight_decay=config.weight_decay)

    tensors = {}
    for t in tasks:
        train_set, val_set = datasets[t]
        video = torch.from_numpy(np.stack([s.arrays[VIDEO] for s in train_set.samples]))
        audio = None
        if AUDIO in ref.modalities and AUDIO in train_set.samples[0].arrays:
            audio = torch.from_numpy(np.stack([s.arrays[AUDIO] for s in train_set.samples]))
        tensors[t] = {
            "video": video,
            "audio": audio,
            "target": labels_to_target(by_id[t].label_space, train_set.labels()),
            "n": len(train_set),
        }
    samplers = {
        t: _CyclingSampler(tensors[t]["n"], config.batch_size, np.random.default_rng(derive_seed(config.seed, "mtl-batches", t)))
        for t in tasks
    }
    iters = max(int(np.ceil(tensors[t]["n"] / samplers[t].batch_size)) for t in tasks)
    for _ in range(config.epochs):
        for _ in range(iters):
            total = None
            opt.zero_grad()
            for t in tasks:
                idx = torch.from_numpy(samplers[t].next_batch().copy())
                audio = tensors[t]["audio"]
                logits = model(t, tensors[t]["video"][idx], None if audio is None else audio[idx])
                loss_t = head_loss(by_id[t].label_space, logits, tensors[t]["target"][idx])
                total = loss_t if total is None else total + loss_t
            total.backward()
            opt.step()

    model.eval()
    report = MetricReport(
        trainable_params=trainable_parameter_count(model),
        total_params=total_parameter_count(model),
    )
    for t in tasks:
        _, val_set = datasets[t]
        video = torch.from_numpy(np.stack([s.arrays[VIDEO] for s in val_set.samples]))
        audio = None
        if AUDIO in ref.modalities and AUDIO in val_set.samples[0].arrays:
            audio = torch.from_numpy(np.stack([s.arrays[AUDIO] for s in val_set.samples]))
        with torch.no_grad():
            logits = model(t, video, audio)
        preds = head_predict(by_id[t].label_space, logits)
        scores = head_scores(by_id[t].label_space, logits)
        _canonical_metrics(report, by_id[t], preds, val_set.labels(), scores)
    report.extra = {"variant": "mtl_hard_share", "tasks": tasks}
    report.wall_clock_s = time.monotonic() - t0
    return model, report, {}


# ---------------------------------------------------------------------------
# Translator checkpoints
# ---------------------------------------------------------------------------

def save_translator(model: TranslatorS | TranslatorG, path: str, extra_meta: dict | None = None) -> None:
    arrays = {name: t.detach().numpy() for name, t in model.state_dict().items()}
    if isinstance(model, TranslatorS):
        meta = {
            "kind": "egot2s",
            "primary": model.primary.to_json(),
            "widths": {t: model.projections[t].in_features for t in model.participants},
            "fusion": model.config.to_json(),
        }
    else:
        meta = {
            "kind": "egot2g",
            "vocab": model.vocab.to_json(),
            "widths": {t: model.projections[t].in_features for t in model.participants},
            "fusion": model.fusion_config.to_json(),
            "decoder": model.decoder_config.to_json(),
        }
    meta.update(extra_meta or {})
    container.write_arrays(path, arrays, meta)


def load_translator(path: str) -> tuple[TranslatorS | TranslatorG, dict]:
    arrays, meta = container.read_arrays(path)
    kind = meta.get("kind")
    if kind == "egot2s":
        model = TranslatorS(
            TaskSpec.from_json(meta["primary"]),
            {t: int(w) for t, w in meta["widths"].items()},
            FusionConfig.from_json(meta["fusion"]),
        )
    elif kind == "egot2g":
        model = TranslatorG(
            Vocabulary.from_json(meta["vocab"]),
            {t: int(w) for t, w in meta["widths"].items()},
            FusionConfig.from_json(meta["fusion"]),
            DecoderConfig.from_json(meta["decoder"]),
        )
    else:
        raise TrainingError(f"{path}: not a translator checkpoint (kind={kind!r})")
    expected = set(model.state_dict().keys())
    got = set(arrays.keys())
    if expected != got:
        raise TrainingError(
            f"{path}: checkpoint/arch mismatch missing={sorted(expected - got)} unexpected={sorted(got - expected)}"
        )
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    model.eval()
    return model, meta
