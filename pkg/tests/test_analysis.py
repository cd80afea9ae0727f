"""Attention analysis: relation matrices, capture plumbing, segment
retrieval, and report rendering."""

from __future__ import annotations

import json
import os

import numpy as np
import pytest
import torch

from egot2 import container
from egot2.analysis import (
    AnalysisError,
    AttentionCapture,
    TaskRelationMatrix,
    capture_s,
    emit_report,
    load_capture,
    relation_matrix_g,
    relation_row_s,
    save_capture,
    segment_table,
    timeline_rows,
    top_segments,
)
from egot2.fusion import FusionConfig, TranslatorS
from egot2.seqgen import DecoderConfig
from egot2.training import TrainConfig, train_egot2g, train_egot2s


def _cfg(**kw):
    kw.setdefault("fusion", FusionConfig(width=16, depth=1, heads=2))
    kw.setdefault("decoder", DecoderConfig(depth=1, heads=2, max_len=6))
    kw.setdefault("batch_size", 16)
    kw.setdefault("epochs", 1)
    kw.setdefault("seed", 3)
    return TrainConfig(**kw)


@pytest.fixture(scope="module")
def s_capture(tiny_frozen, tiny_data):
    config = _cfg(variant="egot2s", primary="B", aux=("A", "C"))
    train_set, val_set = tiny_data["B"]
    translator, _, _ = train_egot2s(config, tiny_frozen, train_set, val_set)
    return translator, capture_s(translator, tiny_frozen, val_set)


@pytest.fixture(scope="module")
def g_model(tiny_suite, tiny_frozen, tiny_data):
    config = _cfg(variant="egot2g", tasks=("A", "B"))
    model, _, _ = train_egot2g(config, tiny_suite, tiny_frozen, tiny_data)
    return model


def _toy_capture():
    """Two clips, task X with two windows (cols 0-1), task Y with one (col 2)."""
    return AttentionCapture(
        task_of_interest="X",
        clip_ids=["c1", "c2"],
        mass=np.array([[0.5, 0.2, 0.3], [0.5, 0.1, 0.4]], dtype=np.float64),
        task_ids=["X", "X", "Y"],
        times_s=[0.0, 8.0, 0.0],
        windows=[0, 1, 0],
        slices={"X": (0, 2), "Y": (2, 3)},
    )


# ---------------------------------------------------------------------------
# TaskRelationMatrix
# ---------------------------------------------------------------------------

def test_matrix_validates_shapes():
    with pytest.raises(AnalysisError, match="does not match"):
        TaskRelationMatrix(rows=["A"], cols=["A", "B"], values=np.zeros((2, 2)), raw=np.zeros((2, 2)))
    with pytest.raises(AnalysisError, match="raw"):
        TaskRelationMatrix(rows=["A"], cols=["A", "B"], values=np.zeros((1, 2)), raw=np.zeros((2, 2)))


def test_matrix_lookup_and_serialization_round_trips():
    m = TaskRelationMatrix(
        rows=["P"],
        cols=["A", "B"],
        values=np.array([[0.25, 0.75]]),
        raw=np.array([[1.0, 3.0]]),
    )
    assert m.value("P", "B") == 0.75

    back = TaskRelationMatrix.from_json(m.to_json())
    assert back.rows == m.rows and back.cols == m.cols
    np.testing.assert_array_equal(back.values, m.values)
    np.testing.assert_array_equal(back.raw, m.raw)

    rows, cols, vals = TaskRelationMatrix.parse_csv(m.to_csv())
    assert rows == ["P"] and cols == ["A", "B"]
    assert np.abs(vals - m.values).max() <= 1e-9


# ---------------------------------------------------------------------------
# capture_s
# ---------------------------------------------------------------------------

def test_capture_geometry_and_provenance(s_capture, tiny_data):
    _, cap = s_capture
    val_set = tiny_data["B"][1]
    # B: 4 frames @1Hz, A: 4 frames, C: one 2s window of 8 frames @4Hz
    assert cap.mass.shape == (len(val_set), 16)
    assert cap.task_ids == ["B"] * 4 + ["A"] * 4 + ["C"] * 8
    assert cap.slices == {"B": (0, 4), "A": (4, 8), "C": (8, 16)}
    assert cap.clip_ids == [s.clip_id for s in val_set.samples]
    # every column is attributed to exactly the task named in its metadata
    for task, (lo, hi) in cap.slices.items():
        assert all(t == task for t in cap.task_ids[lo:hi])
    # C's tokens carry source-timeline times
    assert cap.times_s[8:] == [i / 4.0 for i in range(8)]
    assert np.all(cap.mass >= 0)


def test_capture_mass_totals_match_readout_rows(s_capture):
    translator, cap = s_capture
    # each softmax row sums to 1: total mass = heads x primary readout rows
    expected = translator.config.heads * 4
    np.testing.assert_allclose(cap.mass.sum(axis=1), expected, rtol=1e-5)


def test_pooling_conserves_every_token_column(s_capture):
    _, cap = s_capture
    # the slices partition all columns: nothing dropped, nothing double-counted
    covered = sorted(cap.slices.values())
    assert covered[0][0] == 0 and covered[-1][1] == cap.mass.shape[1]
    assert all(a[1] == b[0] for a, b in zip(covered, covered[1:]))
    pooled = cap.pooled()
    total = sum(pooled.values())
    np.testing.assert_allclose(total, cap.mass.sum(axis=1), rtol=1e-12)


def test_capture_requires_attention_layers(tiny_frozen, tiny_data, tiny_suite):
    spec_b = tiny_suite[1]
    widths = {"B": 8}
    translator = TranslatorS(spec_b, widths, FusionConfig(width=16, depth=0, heads=2))
    with pytest.raises(AnalysisError, match=">= 1 encoder layer"):
        capture_s(translator, tiny_frozen, tiny_data["B"][1])


def test_capture_with_pooled_tokens_reads_all_rows(tiny_frozen, tiny_data):
    config = _cfg(variant="egot2s", primary="B", aux=("A", "C"), temporal_pool_tokens=True)
    train_set, val_set = tiny_data["B"]
    translator, _, _ = train_egot2s(config, tiny_frozen, train_set, val_set)
    cap = capture_s(translator, tiny_frozen, val_set)
    assert cap.mass.shape == (len(val_set), 3)  # one pooled token per task
    assert cap.task_ids == ["B", "A", "C"]
    np.testing.assert_allclose(cap.mass.sum(axis=1), translator.config.heads * 3, rtol=1e-5)


def test_capture_metadata_validation():
    with pytest.raises(AnalysisError, match="column metadata"):
        AttentionCapture("X", ["c"], np.zeros((1, 3)), ["X", "X"], [0.0, 1.0], [0, 0], {"X": (0, 2)})
    with pytest.raises(AnalysisError, match="one mass row per clip"):
        AttentionCapture("X", ["c", "d"], np.zeros((1, 2)), ["X", "X"], [0.0, 1.0], [0, 0], {"X": (0, 2)})
    with pytest.raises(AnalysisError, match="foreign columns"):
        AttentionCapture("X", ["c"], np.zeros((1, 2)), ["X", "Y"], [0.0, 1.0], [0, 0], {"X": (0, 2)})


# ---------------------------------------------------------------------------
# Relation rows / matrices
# ---------------------------------------------------------------------------

def test_relation_row_s_averages_and_normalizes():
    m = relation_row_s(_toy_capture())
    assert m.rows == ["X"] and m.cols == ["X", "Y"]
    np.testing.assert_allclose(m.raw, [[0.65, 0.35]])
    np.testing.assert_allclose(m.values.sum(axis=1), 1.0)
    assert np.all(m.values >= 0)


def test_relation_row_s_from_trained_capture(s_capture):
    _, cap = s_capture
    m = relation_row_s(cap)
    assert m.rows == ["B"] and m.cols == ["B", "A", "C"]
    np.testing.assert_allclose(m.values.sum(axis=1), 1.0, rtol=1e-9)


def test_relation_row_s_rejects_vanished_mass():
    cap = _toy_capture()
    cap.mass[:] = 0.0
    with pytest.raises(AnalysisError, match="vanished"):
        relation_row_s(cap)


def test_relation_matrix_g_shape_and_row_sums(g_model, tiny_suite, tiny_frozen, tiny_data):
    val_sets = {"A": tiny_data["A"][1], "B": tiny_data["B"][1]}
    m = relation_matrix_g(g_model, tiny_suite, tiny_frozen, val_sets)
    assert m.rows == ["A", "B"]  # one row per prompted task with data
    assert m.cols == ["A", "B", "C"]  # one column per suite task
    np.testing.assert_allclose(m.values.sum(axis=1), 1.0, rtol=1e-9)
    # C contributed no tokens to this checkpoint
    assert m.value("A", "C") == 0.0 and m.value("B", "C") == 0.0


def test_relation_matrix_g_needs_overlapping_data(g_model, tiny_suite, tiny_frozen):
    with pytest.raises(AnalysisError, match="no validation sets"):
        relation_matrix_g(g_model, tiny_suite, tiny_frozen, {})


# ---------------------------------------------------------------------------
# Segment retrieval
# ---------------------------------------------------------------------------

def test_top_segments_ranking_and_ties():
    cap = _toy_capture()
    got = top_segments(cap, "X", 10)
    assert got == [("c1", 0, 0.5), ("c2", 0, 0.5), ("c1", 1, 0.2), ("c2", 1, 0.1)]
    weights = [w for _, _, w in got]
    assert weights == sorted(weights, reverse=True)
    assert top_segments(cap, "X", 2) == got[:2]
    assert top_segments(cap, "X", 0) == []
    assert top_segments(cap, "X", 999) == got  # over-asking truncates silently
    assert top_segments(cap, "Y", 10) == [("c2", 0, 0.4), ("c1", 0, 0.3)]


def test_top_segments_validates_arguments():
    cap = _toy_capture()
    with pytest.raises(AnalysisError, match="source task"):
        top_segments(cap, "Z", 3)
    with pytest.raises(AnalysisError, match="n must be"):
        top_segments(cap, "X", -1)


def test_segment_table_covers_every_source_task():
    table = segment_table(_toy_capture(), n=3)
    assert set(table) == {"X", "Y"}
    assert table["X"][0] == {"clip_id": "c1", "window": 0, "weight": 0.5}
    assert len(table["X"]) == 3 and len(table["Y"]) == 2


def test_timeline_rows_in_column_order():
    cap = _toy_capture()
    rows = timeline_rows(cap, ["c2"])
    assert [r["token"] for r in rows] == [0, 1, 2]
    assert [r["mass"] for r in rows] == [0.5, 0.1, 0.4]
    assert rows[2]["task_id"] == "Y" and rows[1]["window"] == 1
    with pytest.raises(AnalysisError, match="not in capture"):
        timeline_rows(cap, ["missing"])


# ---------------------------------------------------------------------------
# Capture files
# ---------------------------------------------------------------------------

def test_capture_file_round_trip(tmp_path, s_capture):
    _, cap = s_capture
    path = str(tmp_path / "capture.egt2")
    save_capture(path, cap)
    back = load_capture(path)
    assert back.task_of_interest == cap.task_of_interest
    assert back.clip_ids == cap.clip_ids
    assert back.task_ids == cap.task_ids
    assert back.times_s == cap.times_s
    assert back.windows == cap.windows
    assert back.slices == cap.slices
    np.testing.assert_array_equal(back.mass, cap.mass)


def test_load_capture_rejects_foreign_or_incomplete_files(tmp_path):
    other = str(tmp_path / "other.egt2")
    container.write_arrays(other, {"mass": np.zeros((1, 1))}, {"kind": "something_else"})
    with pytest.raises(AnalysisError, match="not an attention capture"):
        load_capture(other)

    incomplete = str(tmp_path / "incomplete.egt2")
    container.write_arrays(incomplete, {"mass": np.zeros((1, 1))}, {"kind": "attention_capture"})
    with pytest.raises(AnalysisError, match="missing"):
        load_capture(incomplete)


# ---------------------------------------------------------------------------
# emit_report
# ---------------------------------------------------------------------------

def _seed_run_dir(tmp_path, with_capture: bool):
    run_dir = tmp_path / "run"
    att = run_dir / "attention"
    att.mkdir(parents=True)
    matrix = TaskRelationMatrix(
        rows=["X"], cols=["X", "Y"], values=np.array([[0.65, 0.35]]), raw=np.array([[1.3, 0.7]])
    )
    (att / "relations.json").write_text(matrix.to_json())
    if with_capture:
        save_capture(str(att / "capture.egt2"), _toy_capture())
    return str(run_dir), matrix


def test_emit_report_renders_matrix_files(tmp_path):
    run_dir, matrix = _seed_run_dir(tmp_path, with_capture=False)
    written = emit_report(run_dir)
    names = {os.path.basename(p) for p in written}
    assert names == {"relations.csv", "relations.png"}
    with open(os.path.join(run_dir, "attention", "relations.csv")) as fh:
        rows, cols, vals = TaskRelationMatrix.parse_csv(fh.read())
    assert rows == matrix.rows and cols == matrix.cols
    assert np.abs(vals - matrix.values).max() <= 1e-9
    assert os.path.getsize(os.path.join(run_dir, "attention", "relations.png")) > 0


def test_emit_report_with_capture_adds_segments_and_timelines(tmp_path):
    run_dir, _ = _seed_run_dir(tmp_path, with_capture=True)
    written = emit_report(run_dir, top_n=2, flag_n=2)
    names = {os.path.basename(p) for p in written}
    assert {"top_segments.json", "timelines.csv"} <= names
    with open(os.path.join(run_dir, "attention", "top_segments.json")) as fh:
        table = json.load(fh)
    assert set(table) == {"X", "Y"}
    assert len(table["X"]) == 2
    with open(os.path.join(run_dir, "attention", "timelines.csv")) as fh:
        lines = fh.read().strip().split("\n")
    assert lines[0] == "clip_id,token,task_id,time_s,window,mass"
    assert len(lines) == 1 + 2 * 3  # two flagged clips x three tokens


def test_emit_report_is_byte_stable(tmp_path):
    run_dir, _ = _seed_run_dir(tmp_path, with_capture=True)
    first = {p: open(p, "rb").read() for p in emit_report(run_dir)}
    second = {p: open(p, "rb").read() for p in emit_report(run_dir)}
    assert first == second


def test_emit_report_separate_out_dir_copies_json(tmp_path):
    run_dir, matrix = _seed_run_dir(tmp_path, with_capture=False)
    out = str(tmp_path / "report")
    written = emit_report(run_dir, out_dir=out)
    names = {os.path.basename(p) for p in written}
    assert names == {"relations.csv", "relations.json", "relations.png"}
    with open(os.path.join(out, "relations.json")) as fh:
        back = TaskRelationMatrix.from_json(fh.read())
    np.testing.assert_array_equal(back.values, matrix.values)


def test_emit_report_without_capture_data_fails_loud(tmp_path):
    empty = tmp_path / "empty_run"
    empty.mkdir()
    with pytest.raises(AnalysisError, match="missing capture data"):
        emit_report(str(empty))
