"""Evaluation metrics: accuracy, mAP, localization error, edit distance.

Predictions may be ``Incorrect`` markers (failed detokenizations); those
always score as wrong — accuracy counts them 0, localization error charges
the full clip span, and edit distance treats them as an empty sequence.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .seqgen import Incorrect

__all__ = [
    "MetricError",
    "accuracy",
    "average_precision",
    "loc_error_s",
    "levenshtein",
    "ed_at_z",
    "MetricReport",
]


class MetricError(ValueError):
    pass


def _check_lengths(predictions, labels):
    if len(predictions) != len(labels):
        raise MetricError(f"{len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        raise MetricError("empty evaluation set")


def accuracy(predictions: list, labels: list) -> float:
    """Exact-match fraction; Incorrect predictions count as wrong."""
    _check_lengths(predictions, labels)
    hits = 0
    for p, l in zip(predictions, labels):
        if isinstance(p, Incorrect):
            continue
        hits += int(p == l)
    return hits / len(labels)


def average_precision(scores: list[float], labels: list[bool]) -> float:
    """Area under the precision-recall curve via an all-threshold sweep.

    Standard step-wise AP: sort by score descending, sweep thresholds at each
    distinct score, AP = sum over threshold steps of (recall increment x
    precision at that threshold).  Ties are handled by treating all items
    with an equal score as one threshold group.
    """
    _check_lengths(scores, labels)
    n_pos = sum(bool(l) for l in labels)
    if n_pos == 0:
        raise MetricError("average precision undefined without positives")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    sorted_scores = np.asarray(scores, dtype=np.float64)[order]
    sorted_labels = np.asarray([bool(l) for l in labels])[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(~sorted_labels)
    # threshold boundaries: last index of each tie group
    boundary = np.nonzero(np.diff(sorted_scores))[0]
    idx = np.concatenate([boundary, [len(sorted_scores) - 1]])
    precision = tp[idx] / (tp[idx] + fp[idx])
    recall = tp[idx] / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def loc_error_s(predictions: list, gt_frames: list[int], frame_rate_hz: float, n_frames: int | None = None) -> float:
    """Mean |predicted frame - true frame| / frame rate, in seconds.

    Incorrect predictions are charged the full span (n_frames / rate) when
    the frame count is known, else the worst in-range error for that label.
    """
    _check_lengths(predictions, gt_frames)
    if frame_rate_hz <= 0:
        raise MetricError(f"frame_rate_hz must be > 0, got {frame_rate_hz}")
    total = 0.0
    for p, g in zip(predictions, gt_frames):
        if isinstance(p, Incorrect):
            worst = n_frames if n_frames is not None else max(abs(0 - g), 1)
            total += worst / frame_rate_hz
        else:
            total += abs(int(p) - int(g)) / frame_rate_hz
    return total / len(gt_frames)


def levenshtein(a, b) -> int:
    """Plain edit distance (insert/delete/substitute, unit costs)."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return prev[-1]


def ed_at_z(predictions: list, gt_sequences: list[tuple], z: int) -> float:
    """Mean Levenshtein(pred, gt) / Z; Incorrect counts as an empty sequence."""
    _check_lengths(predictions, gt_sequences)
    if z < 1:
        raise MetricError(f"horizon z must be >= 1, got {z}")
    total = 0.0
    for p, g in zip(predictions, gt_sequences):
        seq = () if isinstance(p, Incorrect) else tuple(p)
        total += levenshtein(seq, tuple(g)) / z
    return total / len(gt_sequences)


@dataclass
class MetricReport:
    """Per-task metric values plus parameter accounting.

    ``wall_clock_s`` is informational and deliberately excluded from the
    serialized forms so reruns with identical seeds produce identical bytes.
    """

    entries: dict[str, dict[str, float]] = field(default_factory=dict)  # task -> metric -> value
    trainable_params: int = 0
    total_params: int = 0
    extra: dict = field(default_factory=dict)
    wall_clock_s: float | None = None

    KNOWN_METRICS = ("accuracy", "mAP", "loc_error_s", "ed_at_z")

    def add(self, task_id: str, metric: str, value: float) -> None:
        if metric not in self.KNOWN_METRICS:
            raise MetricError(f"unknown metric name {metric!r}")
        self.entries.setdefault(task_id, {})[metric] = float(value)

    def get(self, task_id: str, metric: str) -> float:
        return self.entries[task_id][metric]

    def to_json(self) -> str:
        if self.trainable_params > self.total_params:
            raise MetricError("trainable parameter count exceeds total")
        doc = {
            "metrics": self.entries,
            "trainable_params": self.trainable_params,
            "total_params": self.total_params,
            "extra": self.extra,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["task_id", "metric", "value"])
        for task_id in sorted(self.entries):
            for metric in sorted(self.entries[task_id]):
                writer.writerow([task_id, metric, repr(self.entries[task_id][metric])])
        return buf.getvalue()

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        doc = json.loads(text)
        report = MetricReport(
            entries={t: dict(m) for t, m in doc["metrics"].items()},
            trainable_params=int(doc["trainable_params"]),
            total_params=int(doc["total_params"]),
            extra=doc.get("extra", {}),
        )
        return report
