"""Unified sequence interface for the task-general translator.

All task outputs are expressed as short token sequences over one shared
vocabulary: ``[prompt, label word(s)..., EOS]``.  The prompt token names the
task whose answer should be produced and carries zero loss weight; a
transformer decoder with cross-attention over the fused tokens is trained
with the weighted maximum-likelihood loss and decoded greedily.  Decoding
failures never crash: they detokenize to ``Incorrect(reason)`` and score as
wrong predictions downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .fusion import FeaturePart, FusionConfig, FusionEncoder, assemble, project
from .layers import DecoderBlock, causal_mask, sinusoidal_encoding
from .suite import (
    BinarySpace,
    CategoricalSpace,
    FrameIndexSpace,
    SequenceSpace,
    TaskSpec,
)

__all__ = [
    "SeqError",
    "Vocabulary",
    "TargetSequence",
    "Incorrect",
    "build_vocab",
    "tokenize",
    "detokenize",
    "SeqDecoder",
    "DecoderConfig",
    "seq_loss",
    "generate",
    "TranslatorG",
]

PAD, BOS, EOS = "<PAD>", "<BOS>", "<EOS>"


class SeqError(ValueError):
    pass


@dataclass(frozen=True)
class Incorrect:
    """A generated sequence that does not parse back into the label space."""

    reason: str  # missing_prompt | missing_eos | out_of_label_space | arity | empty

    def __bool__(self):  # an Incorrect prediction never equals a label
        return False


def _label_words(space) -> list[str]:
    if isinstance(space, FrameIndexSpace):
        return [str(i) for i in range(space.n_frames)]
    if isinstance(space, BinarySpace):
        return ["True", "False"]
    if isinstance(space, CategoricalSpace):
        return [f"a{i}" for i in range(space.n_classes)]
    if isinstance(space, SequenceSpace):
        # Sequence steps use the same class-word list as categorical tasks of
        # equal vocabulary, mirroring tasks that share an action vocabulary.
        return [f"a{i}" for i in range(space.vocab_size)]
    raise SeqError(f"unhandled label space {space!r}")


@dataclass
class Vocabulary:
    tokens: list[str]
    token_to_id: dict[str, int]
    prompt_ids: dict[str, int]  # task_id -> prompt token id
    label_ids: dict[str, frozenset[int]]  # task_id -> allowed label-token ids
    tasks: dict[str, TaskSpec]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def bos_id(self) -> int:
        return self.token_to_id[BOS]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[EOS]

    def id_of(self, token: str) -> int:
        return self.token_to_id[token]

    def to_json(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "tasks": [self.tasks[t].to_json() for t in self.tasks],
        }

    @staticmethod
    def from_json(doc: dict) -> "Vocabulary":
        suite = [TaskSpec.from_json(d) for d in doc["tasks"]]
        vocab = build_vocab(suite)
        if vocab.tokens != list(doc["tokens"]):
            raise SeqError("serialized vocabulary does not match its task suite")
        return vocab


def build_vocab(suite: list[TaskSpec]) -> Vocabulary:
    """Specials, then prompts in suite order, then label words in suite order.

    Label words shared between tasks (e.g. "True", or class words of tasks
    with equal vocabularies) deduplicate to one id; prompt collisions are
    configuration errors.
    """
    tokens: list[str] = [PAD, BOS, EOS]
    token_to_id = {t: i for i, t in enumerate(tokens)}
    prompt_strings = {spec.prompt_token for spec in suite}
    prompt_ids: dict[str, int] = {}
    for spec in suite:
        if spec.prompt_token in token_to_id:
            raise SeqError(f"prompt token {spec.prompt_token!r} collides with an existing token")
        token_to_id[spec.prompt_token] = len(tokens)
        prompt_ids[spec.task_id] = len(tokens)
        tokens.append(spec.prompt_token)
    label_ids: dict[str, frozenset[int]] = {}
    for spec in suite:
        ids = set()
        for word in _label_words(spec.label_space):
            if word in prompt_strings or word in {PAD, BOS, EOS}:
                raise SeqError(f"label word {word!r} collides with a prompt or special token")
            if word not in token_to_id:
                token_to_id[word] = len(tokens)
                tokens.append(word)
            ids.add(token_to_id[word])
        label_ids[spec.task_id] = frozenset(ids)
    return Vocabulary(
        tokens=tokens,
        token_to_id=token_to_id,
        prompt_ids=prompt_ids,
        label_ids=label_ids,
        tasks={s.task_id: s for s in suite},
    )


@dataclass
class TargetSequence:
    """Tokenized label: ids[0] is the task prompt and carries zero weight."""

    ids: list[int]
    weights: list[float]
    task_id: str

    def __post_init__(self):
        if len(self.ids) != len(self.weights):
            raise SeqError("ids and weights must have equal length")
        if self.weights and self.weights[0] != 0.0:
            raise SeqError("prompt position must carry zero loss weight")

    @property
    def m(self) -> int:
        return len(self.ids)


def _words_for_label(space, label) -> list[str]:
    if isinstance(space, FrameIndexSpace):
        if isinstance(label, bool) or not isinstance(label, int) or not 0 <= label < space.n_frames:
            raise SeqError(f"label {label!r} outside frame_index({space.n_frames})")
        return [str(int(label))]
    if isinstance(space, BinarySpace):
        if not isinstance(label, bool):
            raise SeqError(f"label {label!r} is not a bool")
        return ["True" if label else "False"]
    if isinstance(space, CategoricalSpace):
        if isinstance(label, bool) or not isinstance(label, int) or not 0 <= label < space.n_classes:
            raise SeqError(f"label {label!r} outside categorical({space.n_classes})")
        return [f"a{int(label)}"]
    if isinstance(space, SequenceSpace):
        label = tuple(label)
        if len(label) != space.horizon or any(not 0 <= s < space.vocab_size for s in label):
            raise SeqError(f"label {label!r} outside sequence({space.vocab_size}, {space.horizon})")
        return [f"a{int(s)}" for s in label]
    raise SeqError(f"unhandled label space {space!r}")


def tokenize(vocab: Vocabulary, task: TaskSpec, label) -> TargetSequence:
    words = _words_for_label(task.label_space, label)
    ids = [vocab.prompt_ids[task.task_id]] + [vocab.id_of(w) for w in words] + [vocab.eos_id]
    weights = [0.0] + [1.0] * (len(words) + 1)
    return TargetSequence(ids=ids, weights=weights, task_id=task.task_id)


def detokenize(vocab: Vocabulary, task: TaskSpec, ids: list[int]):
    """Inverse of tokenize; total function returning a label or Incorrect."""
    ids = list(ids)
    if not ids:
        return Incorrect("empty")
    if ids[0] != vocab.prompt_ids[task.task_id]:
        return Incorrect("missing_prompt")
    rest = ids[1:]
    if vocab.eos_id not in rest:
        return Incorrect("missing_eos")
    body = rest[: rest.index(vocab.eos_id)]
    if not body:
        return Incorrect("empty")
    allowed = vocab.label_ids[task.task_id]
    if any(t not in allowed for t in body):
        return Incorrect("out_of_label_space")
    space = task.label_space
    expected = space.horizon if isinstance(space, SequenceSpace) else 1
    if len(body) != expected:
        return Incorrect("arity")
    words = [vocab.tokens[t] for t in body]
    if isinstance(space, FrameIndexSpace):
        return int(words[0])
    if isinstance(space, BinarySpace):
        return words[0] == "True"
    if isinstance(space, CategoricalSpace):
        return int(words[0][1:])
    return tuple(int(w[1:]) for w in words)


# ---------------------------------------------------------------------------
# Sequence decoder
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 2  # L_dec
    heads: int = 4
    ff_mult: int = 4
    max_len: int = 16

    def to_json(self) -> dict:
        return {"depth": self.depth, "heads": self.heads, "ff_mult": self.ff_mult, "max_len": self.max_len}

    @staticmethod
    def from_json(doc: dict) -> "DecoderConfig":
        return DecoderConfig(
            depth=int(doc.get("depth", 2)),
            heads=int(doc.get("heads", 4)),
            ff_mult=int(doc.get("ff_mult", 4)),
            max_len=int(doc.get("max_len", 16)),
        )


class SeqDecoder(nn.Module):
    """Causally masked transformer decoder with cross-attention to fused tokens."""

    def __init__(self, vocab_size: int, width: int, config: DecoderConfig):
        super().__init__()
        self.config = config
        self.width = width
        self.embed = nn.Embedding(vocab_size, width)
        self.blocks = nn.ModuleList(
            DecoderBlock(width, config.heads, config.ff_mult) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, vocab_size)

    def _run(self, ids: torch.Tensor, memory: torch.Tensor, capture: bool = False):
        x = self.embed(ids)
        pos = sinusoidal_encoding(torch.arange(ids.shape[1], dtype=x.dtype, device=x.device), self.width)
        x = x + pos
        mask = causal_mask(ids.shape[1], device=x.device, dtype=x.dtype)
        self_attns, cross_attns = [], []
        for block in self.blocks:
            x, sw, cw = block(x, memory, self_mask=mask, capture=capture)
            if capture:
                self_attns.append(sw)
                cross_attns.append(cw)
        return self.out(self.norm(x)), self_attns, cross_attns

    def forward_teacher(self, target_ids: torch.Tensor, memory: torch.Tensor, capture: bool = False):
        """Teacher-forced logits aligned with target positions.

        target_ids: (B, M).  Returns logits (B, M, V) whose row j scores
        y_seq[j] given y_seq[:j]; row 0 (the prompt slot) is constant zero —
        the prompt is given, never predicted, and carries no loss.
        """
        if target_ids.shape[1] < 2:
            raise SeqError("target sequences need length >= 2 (prompt + content)")
        logits, _, cross = self._run(target_ids[:, :-1], memory, capture=capture)
        zero = torch.zeros_like(logits[:, :1])
        return torch.cat([zero, logits], dim=1), cross

    def step(self, ids: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        """Logits for the next token given the decoded context so far."""
        logits, _, _ = self._run(ids, memory)
        return logits[:, -1]


def seq_loss(logits: torch.Tensor, target_ids: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted NLL: -sum_j w_j log P(y_j | y_<j), mean over the batch.

    Position 0 (the prompt) is excluded outright, so its logits can never
    influence the value or the gradient.
    """
    if logits.shape[:2] != target_ids.shape:
        raise SeqError(f"logits {tuple(logits.shape[:2])} vs targets {tuple(target_ids.shape)}")
    if weights.shape != target_ids.shape:
        raise SeqError(f"weights {tuple(weights.shape)} vs targets {tuple(target_ids.shape)}")
    logp = torch.log_softmax(logits[:, 1:], dim=-1)
    nll = -logp.gather(-1, target_ids[:, 1:, None]).squeeze(-1)
    return (weights[:, 1:] * nll).sum(dim=1).mean()


def generate(
    decoder: SeqDecoder,
    memory: torch.Tensor,
    prompt_id: int,
    max_len: int | None = None,
    eos_id: int = 2,
    pad_id: int = 0,
) -> list[list[int]]:
    """Greedy argmax decoding starting from the prompt token.

    memory: (B, N, D).  Returns one id list per batch row, each beginning
    with the prompt and ending at EOS (or truncated at max_len).
    """
    max_len = max_len if max_len is not None else decoder.config.max_len
    if max_len < 2:
        raise SeqError(f"max_len must be >= 2, got {max_len}")
    b = memory.shape[0]
    device = memory.device
    ids = torch.full((b, 1), prompt_id, dtype=torch.long, device=device)
    finished = torch.zeros(b, dtype=torch.bool, device=device)
    with torch.inference_mode():
        while ids.shape[1] < max_len and not bool(finished.all()):
            nxt = decoder.step(ids, memory).argmax(dim=-1)
            nxt = torch.where(finished, torch.full_like(nxt, pad_id), nxt)
            finished = finished | (nxt == eos_id)
            ids = torch.cat([ids, nxt[:, None]], dim=1)
    out = []
    for row in ids.tolist():
        if eos_id in row:
            row = row[: row.index(eos_id) + 1]
        out.append(row)
    return out


class TranslatorG(nn.Module):
    """Task-general translator: shared fusion encoder + sequence decoder."""

    def __init__(
        self,
        vocab: Vocabulary,
        feature_widths: dict[str, int],
        fusion_config: FusionConfig,
        decoder_config: DecoderConfig,
    ):
        super().__init__()
        self.vocab = vocab
        self.fusion_config = fusion_config
        self.decoder_config = decoder_config
        self.participants = list(feature_widths)
        self.projections = nn.ModuleDict(
            {
                t: nn.Linear(dk, fusion_config.width, bias=fusion_config.proj_bias)
                for t, dk in feature_widths.items()
            }
        )
        self.encoder = FusionEncoder(self.participants, fusion_config)
        self.decoder = SeqDecoder(len(vocab), fusion_config.width, decoder_config)

    def encode(self, parts: list[FeaturePart], capture: bool = False):
        projected = []
        for part in parts:
            if part.task_id not in self.projections:
                raise SeqError(f"no projection for task {part.task_id!r}")
            feats = project(part.feats, self.projections[part.task_id])
            if self.fusion_config.pool_tokens:
                part = FeaturePart(part.task_id, feats.mean(dim=-2, keepdim=True), [0.0], [0])
            else:
                part = FeaturePart(part.task_id, feats, part.times_s, part.windows)
            projected.append(part)
        batch = assemble(projected, task_embed=self.encoder.task_embed)
        fused, attns = self.encoder(batch.tokens, capture=capture)
        return fused, batch, attns

    def loss(self, parts: list[FeaturePart], target_ids: torch.Tensor, weights: torch.Tensor):
        fused, _, _ = self.encode(parts)
        logits, _ = self.decoder.forward_teacher(target_ids, fused)
        return seq_loss(logits, target_ids, weights)

    def generate_ids(self, parts: list[FeaturePart], task_id: str, max_len: int | None = None):
        fused, _, _ = self.encode(parts)
        return generate(
            self.decoder,
            fused,
            prompt_id=self.vocab.prompt_ids[task_id],
            max_len=max_len,
            eos_id=self.vocab.eos_id,
            pad_id=self.vocab.pad_id,
        )
