"""Task translator core: projection, token assembly, fusion encoder, heads.

Per-task features h_k (T_k x D_k) are linearly projected into a shared width
D, concatenated along the token axis in fixed task order, tagged with a
sinusoidal position code over their source-timeline times plus a learned
per-task source embedding, and fused by a stack of self-attention blocks.
The task-specific variant reads its prediction out of the fused tokens with
a small label-space head; only projections, encoder, and head ever receive
gradients — the upstream backbones stay frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .layers import EncoderBlock, sinusoidal_encoding
from .suite import (
    BinarySpace,
    CategoricalSpace,
    FrameIndexSpace,
    SequenceSpace,
    TaskSpec,
)

__all__ = [
    "FusionError",
    "FusionConfig",
    "FeaturePart",
    "TokenBatch",
    "project",
    "assemble",
    "FusionEncoder",
    "DecoderHeadS",
    "TranslatorS",
    "forward_s",
    "trainable_parameter_count",
    "total_parameter_count",
]

# Positions for the sinusoidal code are measured in scaled seconds so that
# neighbouring frames at the suite's typical 2-4 Hz rates land a full
# position step apart.
POS_UNITS_PER_SECOND = 4.0


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    width: int = 64  # shared token width D
    heads: int = 4
    depth: int = 2  # encoder layers L
    proj_bias: bool = False
    ff_mult: int = 4
    pool_tokens: bool = False  # temporal_pool_tokens ablation: one token per task

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "heads": self.heads,
            "depth": self.depth,
            "proj_bias": self.proj_bias,
            "ff_mult": self.ff_mult,
            "pool_tokens": self.pool_tokens,
        }

    @staticmethod
    def from_json(doc: dict) -> "FusionConfig":
        return FusionConfig(
            width=int(doc.get("width", 64)),
            heads=int(doc.get("heads", 4)),
            depth=int(doc.get("depth", 2)),
            proj_bias=bool(doc.get("proj_bias", False)),
            ff_mult=int(doc.get("ff_mult", 4)),
            pool_tokens=bool(doc.get("pool_tokens", False)),
        )


@dataclass
class FeaturePart:
    """One backbone's contribution: features plus per-token provenance."""

    task_id: str
    feats: torch.Tensor  # (B, T, D_k) or (T, D_k)
    times_s: list[float]  # source-timeline time of each token
    windows: list[int]  # moving-window index of each token

    def __post_init__(self):
        t = self.feats.shape[-2]
        if len(self.times_s) != t or len(self.windows) != t:
            raise FusionError(
                f"{self.task_id}: {t} tokens but {len(self.times_s)} times / {len(self.windows)} windows"
            )


@dataclass
class TokenBatch:
    """Assembled token matrix with exact per-token provenance."""

    tokens: torch.Tensor  # (B, N, D)
    task_ids: list[str]  # len N
    times_s: list[float]  # len N
    windows: list[int]  # len N
    slices: dict[str, tuple[int, int]] = field(default_factory=dict)  # task -> [lo, hi)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[-2]

    def task_columns(self, task_id: str) -> tuple[int, int]:
        if task_id not in self.slices:
            raise FusionError(f"no tokens from task {task_id!r}")
        return self.slices[task_id]


def project(h_k: torch.Tensor, proj: nn.Linear) -> torch.Tensor:
    """h~_k = P_k h_k, applied per frame."""
    if h_k.shape[-1] != proj.in_features:
        raise FusionError(f"feature width {h_k.shape[-1]} != projection input {proj.in_features}")
    return proj(h_k)


def assemble(
    parts: list[FeaturePart],
    task_embed: dict[str, torch.Tensor] | None = None,
    pos_scale: float = POS_UNITS_PER_SECOND,
) -> TokenBatch:
    """Concatenate projected parts along the token axis in the given order.

    Adds the sinusoidal time code and, when provided, the learned per-task
    source embedding.  Provenance metadata aligns 1:1 with token rows.
    """
    if not parts:
        raise FusionError("assemble needs >= 1 part")
    width = parts[0].feats.shape[-1]
    batched = parts[0].feats.ndim == 3
    chunks, task_ids, times, windows = [], [], [], []
    slices: dict[str, tuple[int, int]] = {}
    pos = 0
    for part in parts:
        if part.feats.shape[-1] != width:
            raise FusionError(
                f"{part.task_id}: token width {part.feats.shape[-1]} != {width}; project first"
            )
        if (part.feats.ndim == 3) != batched:
            raise FusionError("mixed batched/unbatched parts")
        if part.task_id in slices:
            raise FusionError(f"duplicate part for task {part.task_id!r}")
        x = part.feats
        t = torch.tensor(part.times_s, dtype=x.dtype, device=x.device) * pos_scale
        x = x + sinusoidal_encoding(t, width)
        if task_embed is not None:
            x = x + task_embed[part.task_id]
        chunks.append(x)
        n = part.feats.shape[-2]
        slices[part.task_id] = (pos, pos + n)
        pos += n
        task_ids.extend([part.task_id] * n)
        times.extend(part.times_s)
        windows.extend(part.windows)
    return TokenBatch(
        tokens=torch.cat(chunks, dim=-2),
        task_ids=task_ids,
        times_s=times,
        windows=windows,
        slices=slices,
    )


class FusionEncoder(nn.Module):
    """L pre-norm self-attention blocks plus the per-task source embeddings.

    L = 0 is the identity (useful for plumbing tests).  The task embeddings
    live here so the translator's trainable parameters decompose exactly into
    projections + encoder + head.
    """

    def __init__(self, tasks: list[str], config: FusionConfig):
        super().__init__()
        self.config = config
        self.blocks = nn.ModuleList(
            EncoderBlock(config.width, config.heads, config.ff_mult) for _ in range(config.depth)
        )
        self.task_embed = nn.ParameterDict(
            {t: nn.Parameter(torch.randn(config.width) * 0.02) for t in tasks}
        )

    def forward(self, tokens: torch.Tensor, capture: bool = False):
        if tokens.shape[-1] != self.config.width:
            raise FusionError(f"token width {tokens.shape[-1]} != encoder width {self.config.width}")
        attns = []
        x = tokens
        for block in self.blocks:
            x, weights = block(x, capture=capture)
            if capture:
                attns.append(weights)
        return x, attns


class DecoderHeadS(nn.Module):
    """Primary-task readout from fused tokens.

    The head decodes from the primary task's own token rows — auxiliary
    information reaches the prediction only through encoder attention into
    those rows, which is what the relation analysis measures.
    frame_index: one score per primary row; binary/categorical: class logits
    from the mean over primary rows; sequence: horizon x vocab logit groups
    from the mean over primary rows.
    With pooled tokens (one token per task) the head instead reads the mean
    over all task tokens, and frame_index maps it to all frame logits at once.
    """

    def __init__(self, task: TaskSpec, width: int, pooled_tokens: bool = False):
        super().__init__()
        self.task = task
        self.space = task.label_space
        self.pooled_tokens = pooled_tokens
        self.norm = nn.LayerNorm(width)
        if isinstance(self.space, FrameIndexSpace):
            out = self.space.n_frames if pooled_tokens else 1
        elif isinstance(self.space, BinarySpace):
            out = 2
        elif isinstance(self.space, CategoricalSpace):
            out = self.space.n_classes
        elif isinstance(self.space, SequenceSpace):
            out = self.space.horizon * self.space.vocab_size
        else:
            raise FusionError(f"unhandled label space {self.space!r}")
        self.proj = nn.Linear(width, out)

    def forward(self, fused: torch.Tensor, batch: TokenBatch) -> torch.Tensor:
        if self.pooled_tokens:
            pooled = fused.mean(dim=-2)
        else:
            lo, hi = batch.task_columns(self.task.task_id)
            own = fused[..., lo:hi, :]
            if isinstance(self.space, FrameIndexSpace):
                if hi - lo != self.space.n_frames:
                    raise FusionError(
                        f"{self.task.task_id}: {hi - lo} own tokens for {self.space.n_frames} frames"
                    )
                return self.proj(self.norm(own)).squeeze(-1)
            pooled = own.mean(dim=-2)
        logits = self.proj(self.norm(pooled))
        if isinstance(self.space, SequenceSpace):
            return logits.view(*logits.shape[:-1], self.space.horizon, self.space.vocab_size)
        return logits


class TranslatorS(nn.Module):
    """Task-specific translator: projections + fusion encoder + decoder head."""

    def __init__(
        self,
        primary: TaskSpec,
        feature_widths: dict[str, int],  # participating task -> D_k
        config: FusionConfig,
    ):
        super().__init__()
        if primary.task_id not in feature_widths:
            raise FusionError(f"primary task {primary.task_id} not among participants")
        self.primary = primary
        self.config = config
        self.participants = list(feature_widths)
        self.projections = nn.ModuleDict(
            {t: nn.Linear(dk, config.width, bias=config.proj_bias) for t, dk in feature_widths.items()}
        )
        self.encoder = FusionEncoder(self.participants, config)
        self.head = DecoderHeadS(primary, config.width, pooled_tokens=config.pool_tokens)

    def forward(self, parts: list[FeaturePart], capture: bool = False):
        """Returns (logits, token_batch, attention stack)."""
        projected = []
        for part in parts:
            if part.task_id not in self.projections:
                raise FusionError(f"no projection for task {part.task_id!r}")
            feats = project(part.feats, self.projections[part.task_id])
            if self.config.pool_tokens:
                pooled = feats.mean(dim=-2, keepdim=True)
                part = FeaturePart(part.task_id, pooled, [0.0], [0])
            else:
                part = FeaturePart(part.task_id, feats, part.times_s, part.windows)
            projected.append(part)
        batch = assemble(projected, task_embed=self.encoder.task_embed)
        fused, attns = self.encoder(batch.tokens, capture=capture)
        logits = self.head(fused, batch)
        return logits, batch, attns


def forward_s(sample_arrays, frozen_backbones: dict, translator: TranslatorS, stride_s: float = 8.0):
    """Full single-clip pipeline: adapt -> extract -> project/fuse -> decode.

    ``frozen_backbones`` maps task_id -> FrozenBackbone; tasks whose
    backbones cannot consume the clip are skipped (they were Excluded at
    translator build time).
    """
    from .backbone import Excluded, adapt_input, token_times_s

    parts = []
    for task_id in translator.participants:
        fb = frozen_backbones[task_id]
        adapted = adapt_input(sample_arrays, translator.primary, fb.spec, stride_s)
        if isinstance(adapted, Excluded):
            raise FusionError(f"participant {task_id} is Excluded at this span ({adapted.reason})")
        feats = fb.extract_features(adapted)
        times = token_times_s(fb.spec, adapted.window_starts_s)
        windows = [w for w in range(len(adapted.windows)) for _ in range(fb.spec.n_tokens)]
        parts.append(FeaturePart(task_id, feats[None], times, windows))
    logits, _, _ = translator(parts)
    return logits


def trainable_parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def total_parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
