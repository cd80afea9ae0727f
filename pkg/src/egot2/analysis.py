"""Attention interpretability: task-relation matrices and segment retrieval.

For the task-specific translator the relation row is the last encoder
layer's self-attention mass flowing into the readout rows, pooled per source
task; for the task-general translator it is the last decoder layer's
cross-attention mass over fused tokens.  Per sample the attention is summed
over heads and output positions, pooled over each source task's token
columns, averaged over the validation set, and finally row-normalized.

Everything downstream (relation rows, top-weighted segments, per-clip
timelines) derives from one captured per-sample, per-token mass matrix so
that column-to-task attribution is made in exactly one place.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from .container import read_arrays, write_arrays
from .fusion import TranslatorS
from .seqgen import TranslatorG
from .suite import Dataset, FrameIndexSpace, TaskSpec
from .training import _g_participants, _slice_parts, _target_tensor, precompute_parts

__all__ = [
    "AnalysisError",
    "AttentionCapture",
    "TaskRelationMatrix",
    "capture_s",
    "relation_row_s",
    "relation_matrix_g",
    "top_segments",
    "segment_table",
    "save_capture",
    "load_capture",
    "emit_report",
]


class AnalysisError(RuntimeError):
    pass


@dataclass
class TaskRelationMatrix:
    rows: list[str]  # task-of-interest (primary task or prompt)
    cols: list[str]  # source tasks contributing tokens
    values: np.ndarray  # row-normalized
    raw: np.ndarray  # pre-normalization pooled masses

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.values.shape != (len(self.rows), len(self.cols)):
            raise AnalysisError(
                f"matrix shape {self.values.shape} does not match "
                f"{len(self.rows)} rows x {len(self.cols)} cols"
            )
        if self.raw.shape != self.values.shape:
            raise AnalysisError("raw and normalized shapes differ")

    def value(self, row: str, col: str) -> float:
        return float(self.values[self.rows.index(row), self.cols.index(col)])

    def to_csv(self) -> str:
        lines = ["task," + ",".join(self.cols)]
        for i, row in enumerate(self.rows):
            lines.append(row + "," + ",".join(repr(float(v)) for v in self.values[i]))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {
            "rows": list(self.rows),
            "cols": list(self.cols),
            "values": [[float(v) for v in row] for row in self.values],
            "raw": [[float(v) for v in row] for row in self.raw],
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @staticmethod
    def from_json(text: str) -> "TaskRelationMatrix":
        doc = json.loads(text)
        return TaskRelationMatrix(
            rows=list(doc["rows"]),
            cols=list(doc["cols"]),
            values=np.asarray(doc["values"], dtype=np.float64),
            raw=np.asarray(doc["raw"], dtype=np.float64),
        )

    @staticmethod
    def parse_csv(text: str) -> tuple[list[str], list[str], np.ndarray]:
        lines = [line for line in text.strip().split("\n") if line]
        cols = lines[0].split(",")[1:]
        rows, vals = [], []
        for line in lines[1:]:
            cells = line.split(",")
            rows.append(cells[0])
            vals.append([float(c) for c in cells[1:]])
        return rows, cols, np.asarray(vals, dtype=np.float64)


@dataclass
class AttentionCapture:
    """Per-sample attention mass on every fused token, with provenance.

    mass[b, j] is the total attention (summed over heads and readout query
    positions) that sample b's forward pass placed on token column j.  The
    column metadata mirrors the assembled token batch, so column j belongs
    to task_ids[j], carries source-time times_s[j], and came from moving
    window windows[j].
    """

    task_of_interest: str
    clip_ids: list[str]
    mass: np.ndarray  # (n_samples, n_tokens) float64
    task_ids: list[str]  # per token column
    times_s: list[float]
    windows: list[int]
    slices: dict[str, tuple[int, int]]  # task -> [lo, hi) columns

    def __post_init__(self):
        n_tok = self.mass.shape[1]
        if not (len(self.task_ids) == len(self.times_s) == len(self.windows) == n_tok):
            raise AnalysisError("column metadata length does not match mass matrix")
        if self.mass.shape[0] != len(self.clip_ids):
            raise AnalysisError("one mass row per clip required")
        for task, (lo, hi) in self.slices.items():
            if any(t != task for t in self.task_ids[lo:hi]):
                raise AnalysisError(f"slice for {task!r} covers foreign columns")

    def pooled(self) -> dict[str, np.ndarray]:
        """task -> (n_samples,) mass summed over that task's token columns."""
        return {t: self.mass[:, lo:hi].sum(axis=1) for t, (lo, hi) in self.slices.items()}


def _readout_rows(translator: TranslatorS, batch) -> tuple[int, int] | None:
    """Query rows that feed the prediction head.

    With per-token fusion the head reads the primary task's own token rows,
    so only attention emitted by those rows is decode-relevant; with pooled
    fusion every row contributes equally to the head input."""
    if translator.config.pool_tokens:
        return None
    return batch.task_columns(translator.primary.task_id)


def capture_s(
    translator: TranslatorS,
    backbones,
    val_set: Dataset,
    stride_s: float = 8.0,
    batch_size: int = 256,
) -> AttentionCapture:
    """Run the translator over a dataset recording last-layer attention mass."""
    if translator.config.depth < 1:
        raise AnalysisError("attention capture needs >= 1 encoder layer")
    parts, _ = precompute_parts(val_set, backbones, translator.participants, stride_s)
    n = parts[0].feats.shape[0]
    chunks = []
    meta = None
    for lo in range(0, n, batch_size):
        idx = torch.arange(lo, min(lo + batch_size, n))
        with torch.no_grad():
            _, batch, attns = translator(_slice_parts(parts, idx), capture=True)
        attn = attns[-1]
        rows = _readout_rows(translator, batch)
        if rows is not None:
            attn = attn[:, :, rows[0] : rows[1], :]
        chunks.append(attn.sum(dim=(1, 2)).to(torch.float64).numpy())
        if meta is None:
            meta = batch
    return AttentionCapture(
        task_of_interest=translator.primary.task_id,
        clip_ids=[s.clip_id for s in val_set.samples],
        mass=np.concatenate(chunks, axis=0),
        task_ids=list(meta.task_ids),
        times_s=[float(t) for t in meta.times_s],
        windows=[int(w) for w in meta.windows],
        slices=dict(meta.slices),
    )


def relation_row_s(capture: AttentionCapture) -> TaskRelationMatrix:
    """One relation row: dataset-averaged pooled mass per source task."""
    pooled = capture.pooled()
    cols = list(capture.slices)
    raw = np.asarray([[float(pooled[c].mean()) for c in cols]])
    total = raw.sum(axis=1, keepdims=True)
    if not np.all(total > 0):
        raise AnalysisError("attention mass vanished; nothing to normalize")
    return TaskRelationMatrix(
        rows=[capture.task_of_interest], cols=cols, values=raw / total, raw=raw
    )


def relation_matrix_g(
    model: TranslatorG,
    suite: list[TaskSpec],
    backbones,
    val_sets: dict[str, Dataset],
    stride_s: float = 8.0,
    batch_size: int = 256,
) -> TaskRelationMatrix:
    """Prompt-by-source-task matrix from last-layer decoder cross-attention.

    Teacher-forces each task's ground-truth target sequence; attention is
    summed over heads and target positions, pooled per source task, and
    averaged over that task's validation set.
    """
    by_id = {s.task_id: s for s in suite}
    rows = [s.task_id for s in suite if s.task_id in val_sets]
    if not rows:
        raise AnalysisError("no validation sets overlap the suite")
    cols = [s.task_id for s in suite]
    raw = np.zeros((len(rows), len(cols)))
    for r, task in enumerate(rows):
        val_set = val_sets[task]
        participants = [t for t in _g_participants(by_id[task], suite, backbones) if t in model.participants]
        parts, _ = precompute_parts(val_set, backbones, participants, stride_s)
        ids, _ = _target_tensor(model.vocab, by_id[task], val_set.labels())
        n = parts[0].feats.shape[0]
        sums: dict[str, float] = {}
        for lo in range(0, n, batch_size):
            idx = torch.arange(lo, min(lo + batch_size, n))
            with torch.no_grad():
                fused, batch, _ = model.encode(_slice_parts(parts, idx))
                _, cross = model.decoder.forward_teacher(ids[idx], fused, capture=True)
            mass = cross[-1].sum(dim=(1, 2)).to(torch.float64).numpy()
            for t, (lo_c, hi_c) in batch.slices.items():
                sums[t] = sums.get(t, 0.0) + float(mass[:, lo_c:hi_c].sum())
        for c, col in enumerate(cols):
            raw[r, c] = sums.get(col, 0.0) / n
    totals = raw.sum(axis=1, keepdims=True)
    if not np.all(totals > 0):
        raise AnalysisError("attention mass vanished; nothing to normalize")
    return TaskRelationMatrix(rows=rows, cols=cols, values=raw / totals, raw=raw)


def top_segments(capture: AttentionCapture, source_task: str, n: int) -> list[tuple[str, int, float]]:
    """Clips/windows ranked by attention mass on ``source_task`` tokens.

    Returns up to ``n`` (clip_id, window_index, weight) triples with
    non-increasing weights; ties break by clip_id then window index.  Asking
    for more entries than exist truncates silently.
    """
    if n < 0:
        raise AnalysisError(f"n must be >= 0, got {n}")
    if n == 0:
        return []
    if source_task not in capture.slices:
        raise AnalysisError(f"no tokens from source task {source_task!r}")
    lo, hi = capture.slices[source_task]
    windows = capture.windows[lo:hi]
    order = sorted(set(windows))
    cols = {w: [lo + i for i, wi in enumerate(windows) if wi == w] for w in order}
    entries = []
    for b, clip_id in enumerate(capture.clip_ids):
        for w in order:
            entries.append((clip_id, w, float(capture.mass[b, cols[w]].sum())))
    entries.sort(key=lambda e: (-e[2], e[0], e[1]))
    return entries[:n]


def segment_table(capture: AttentionCapture, n: int = 10) -> dict[str, list]:
    """Top segments for every source task, JSON-ready."""
    table = {}
    for task in capture.slices:
        table[task] = [
            {"clip_id": c, "window": w, "weight": weight}
            for c, w, weight in top_segments(capture, task, n)
        ]
    return table


def timeline_rows(capture: AttentionCapture, clip_ids: list[str]) -> list[dict]:
    """Per-token mass rows for the flagged clips, in column order."""
    index = {c: i for i, c in enumerate(capture.clip_ids)}
    rows = []
    for clip_id in clip_ids:
        if clip_id not in index:
            raise AnalysisError(f"clip {clip_id!r} not in capture")
        b = index[clip_id]
        for j in range(capture.mass.shape[1]):
            rows.append(
                {
                    "clip_id": clip_id,
                    "token": j,
                    "task_id": capture.task_ids[j],
                    "time_s": capture.times_s[j],
                    "window": capture.windows[j],
                    "mass": float(capture.mass[b, j]),
                }
            )
    return rows


_CAPTURE_META_KEYS = ("task_of_interest", "clip_ids", "task_ids", "times_s", "windows", "slices")


def save_capture(path: str, capture: AttentionCapture) -> None:
    meta = {
        "kind": "attention_capture",
        "task_of_interest": capture.task_of_interest,
        "clip_ids": capture.clip_ids,
        "task_ids": capture.task_ids,
        "times_s": capture.times_s,
        "windows": capture.windows,
        "slices": {t: list(lohi) for t, lohi in capture.slices.items()},
    }
    write_arrays(path, {"mass": capture.mass}, meta)


def load_capture(path: str) -> AttentionCapture:
    arrays, meta = read_arrays(path)
    if meta.get("kind") != "attention_capture":
        raise AnalysisError(f"{path}: not an attention capture file")
    for key in _CAPTURE_META_KEYS:
        if key not in meta:
            raise AnalysisError(f"{path}: capture metadata missing {key!r}")
    return AttentionCapture(
        task_of_interest=meta["task_of_interest"],
        clip_ids=list(meta["clip_ids"]),
        mass=arrays["mass"],
        task_ids=list(meta["task_ids"]),
        times_s=[float(t) for t in meta["times_s"]],
        windows=[int(w) for w in meta["windows"]],
        slices={t: (int(lo), int(hi)) for t, (lo, hi) in meta["slices"].items()},
    )


def emit_report(run_dir: str, out_dir: str | None = None, top_n: int = 10, flag_n: int = 3) -> list[str]:
    """Render a run's captured attention into CSV/JSON/heatmap artifacts.

    Needs ``<run_dir>/attention/relations.json``; when the per-sample
    capture file is present, top-segment tables and per-clip timelines are
    rendered too.  Runs trained without attention capture fail here.
    """
    att_dir = os.path.join(run_dir, "attention")
    src = os.path.join(att_dir, "relations.json")
    if not os.path.exists(src):
        raise AnalysisError(f"missing capture data: no {src} (run trained without attention capture)")
    out_dir = out_dir or att_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(src) as fh:
        matrix = TaskRelationMatrix.from_json(fh.read())
    written = []

    csv_path = os.path.join(out_dir, "relations.csv")
    with open(csv_path, "w") as fh:
        fh.write(matrix.to_csv())
    written.append(csv_path)

    json_path = os.path.join(out_dir, "relations.json")
    if os.path.abspath(json_path) != os.path.abspath(src):
        with open(json_path, "w") as fh:
            fh.write(matrix.to_json())
        written.append(json_path)

    png_path = os.path.join(out_dir, "relations.png")
    _render_heatmap(matrix, png_path)
    written.append(png_path)

    capture_path = os.path.join(att_dir, "capture.egt2")
    if os.path.exists(capture_path):
        capture = load_capture(capture_path)
        table = segment_table(capture, top_n)
        seg_path = os.path.join(out_dir, "top_segments.json")
        with open(seg_path, "w") as fh:
            fh.write(json.dumps(table, sort_keys=True, indent=1) + "\n")
        written.append(seg_path)

        flagged: list[str] = []
        for task in table:
            for entry in table[task]:
                if entry["clip_id"] not in flagged:
                    flagged.append(entry["clip_id"])
                if len(flagged) >= flag_n:
                    break
        rows = timeline_rows(capture, sorted(flagged))
        tl_path = os.path.join(out_dir, "timelines.csv")
        with open(tl_path, "w") as fh:
            fh.write("clip_id,token,task_id,time_s,window,mass\n")
            for r in rows:
                fh.write(
                    f"{r['clip_id']},{r['token']},{r['task_id']},"
                    f"{r['time_s']!r},{r['window']},{r['mass']!r}\n"
                )
        written.append(tl_path)
    return written


def _render_heatmap(matrix: TaskRelationMatrix, path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1.6 + 0.9 * len(matrix.cols), 1.2 + 0.7 * len(matrix.rows)))
    im = ax.imshow(matrix.values, cmap="viridis", vmin=0.0, aspect="auto")
    ax.set_xticks(range(len(matrix.cols)))
    ax.set_xticklabels(matrix.cols, rotation=45, ha="right")
    ax.set_yticks(range(len(matrix.rows)))
    ax.set_yticklabels(matrix.rows)
    for i in range(len(matrix.rows)):
        for j in range(len(matrix.cols)):
            ax.text(
                j, i, f"{matrix.values[i, j]:.2f}", ha="center", va="center",
                color="white" if matrix.values[i, j] < 0.5 else "black", fontsize=8,
            )
    fig.colorbar(im, ax=ax, shrink=0.85)
    ax.set_xlabel("source task tokens")
    ax.set_ylabel("task of interest")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
