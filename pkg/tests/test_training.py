"""Training orchestration: config validation, stage-I determinism, both
translator variants, the frozen-backbone contract, gradient-aggregation
linearity, baselines, ablations, and checkpoint round-trips."""

from __future__ import annotations

import copy

import numpy as np
import pytest
import torch

from conftest import micro_suite

from egot2 import container
from egot2.backbone import BackboneSpec, FrozenBackbone, TaskModel
from egot2.fusion import FeaturePart, FusionConfig, trainable_parameter_count
from egot2.seqgen import DecoderConfig, build_vocab, tokenize
from egot2.training import (
    IncompatibleError,
    TrainConfig,
    TrainingError,
    _CyclingSampler,
    evaluate_translator_g,
    evaluate_translator_s,
    load_translator,
    run_baseline,
    run_stage1,
    save_translator,
    train_egot2g,
    train_egot2s,
)


def _fusion():
    return FusionConfig(width=16, depth=1, heads=2)


def _cfg(**kw):
    kw.setdefault("fusion", _fusion())
    kw.setdefault("decoder", DecoderConfig(depth=1, heads=2, max_len=6))
    kw.setdefault("batch_size", 16)
    kw.setdefault("epochs", 3)
    kw.setdefault("seed", 3)
    return TrainConfig(**kw)


@pytest.fixture(scope="module")
def s_run(tiny_frozen, tiny_data):
    config = _cfg(variant="egot2s", primary="B", aux=("A", "C"))
    train_set, val_set = tiny_data["B"]
    return config, train_egot2s(config, tiny_frozen, train_set, val_set)


@pytest.fixture(scope="module")
def g_run(tiny_suite, tiny_frozen, tiny_data):
    config = _cfg(variant="egot2g", tasks=("A", "B"))
    return config, train_egot2g(config, tiny_suite, tiny_frozen, tiny_data)


# ---------------------------------------------------------------------------
# TrainConfig
# ---------------------------------------------------------------------------

def test_config_rejects_unknown_variant():
    with pytest.raises(TrainingError, match="unknown variant"):
        _cfg(variant="zero_shot")


@pytest.mark.parametrize("variant", ["egot2s", "finetune", "transfer", "late_fusion"])
def test_config_single_primary_variants_require_primary(variant):
    with pytest.raises(TrainingError, match="primary"):
        _cfg(variant=variant, transfer_source="A")


def test_config_multi_task_variants_require_two_tasks():
    with pytest.raises(TrainingError, match=">= 2 tasks"):
        _cfg(variant="egot2g", tasks=("A",))
    with pytest.raises(TrainingError, match=">= 2 tasks"):
        _cfg(variant="mtl_hard_share", tasks=("B",))
    # and mtl needs no primary
    assert _cfg(variant="mtl_hard_share", tasks=("A", "B")).primary is None


def test_config_transfer_requires_source():
    with pytest.raises(TrainingError, match="transfer_source"):
        _cfg(variant="transfer", primary="A")


def test_config_ablation_flags_only_for_translators():
    with pytest.raises(TrainingError, match="ablation"):
        _cfg(variant="finetune", primary="A", unfreeze_backbones=True)
    with pytest.raises(TrainingError, match="ablation"):
        _cfg(variant="late_fusion", primary="A", temporal_pool_tokens=True)
    assert _cfg(variant="egot2s", primary="A", temporal_pool_tokens=True)


def test_config_optimizer_and_lr_defaults():
    with pytest.raises(TrainingError, match="optimizer"):
        _cfg(variant="egot2s", primary="A", optimizer="sgd")
    assert _cfg(variant="egot2s", primary="A").effective_lr == 1e-3
    assert _cfg(variant="finetune", primary="A").effective_lr == 1e-3
    assert _cfg(variant="egot2g", tasks=("A", "B")).effective_lr == 1e-4
    assert _cfg(variant="egot2g", tasks=("A", "B"), lr=0.5).effective_lr == 0.5


# ---------------------------------------------------------------------------
# Stage I
# ---------------------------------------------------------------------------

def test_stage1_requires_every_dataset(tiny_suite, tiny_backbone_specs, tiny_data):
    partial = {"A": tiny_data["A"], "B": tiny_data["B"]}
    with pytest.raises(TrainingError, match="no dataset for task C"):
        run_stage1(tiny_suite, tiny_backbone_specs, partial, seed=0)


def test_stage1_same_seed_bitwise_identical(tiny_suite, tiny_backbone_specs, tiny_data):
    kw = dict(seed=5, lr=1e-2, epochs=1, batch_size=16)
    first = run_stage1(tiny_suite, tiny_backbone_specs, tiny_data, **kw)
    second = run_stage1(tiny_suite, tiny_backbone_specs, tiny_data, **kw)
    for t in ("A", "B", "C"):
        a = {k: v.detach().numpy().tobytes() for k, v in first[t][0].state_dict().items()}
        b = {k: v.detach().numpy().tobytes() for k, v in second[t][0].state_dict().items()}
        assert a == b


# ---------------------------------------------------------------------------
# Cycling sampler
# ---------------------------------------------------------------------------

def test_cycling_sampler_constant_batches_and_full_coverage():
    sampler = _CyclingSampler(5, 2, np.random.default_rng(0))
    seen = set()
    for _ in range(10):
        batch = sampler.next_batch()
        assert len(batch) == 2
        seen.update(batch.tolist())
    assert seen == {0, 1, 2, 3, 4}


def test_cycling_sampler_caps_batch_at_population():
    sampler = _CyclingSampler(3, 8, np.random.default_rng(1))
    assert sorted(sampler.next_batch().tolist()) == [0, 1, 2]


# ---------------------------------------------------------------------------
# Task-specific translator training
# ---------------------------------------------------------------------------

def test_egot2s_trains_and_reports(s_run, tiny_data):
    _, (translator, report, details) = s_run
    assert 0.0 <= report.get("B", "accuracy") <= 1.0
    assert details["participants"] == ["B", "A", "C"]
    assert details["excluded"] == []
    curve = report.extra["loss_curve"]
    assert len(curve) == 3 and curve[-1] < curve[0]
    assert report.trainable_params < report.total_params


def test_egot2s_trainable_is_exactly_projections_encoder_head(s_run):
    _, (translator, report, _) = s_run
    split = report.extra["param_split"]
    assert report.trainable_params == split["projections"] + split["encoder"] + split["head"]
    assert report.trainable_params == trainable_parameter_count(translator)
    assert report.trainable_params == sum(p.numel() for p in translator.parameters())


def test_egot2s_never_touches_frozen_backbones(tiny_frozen, tiny_data):
    before = {t: fb.state_bytes() for t, fb in tiny_frozen.items()}
    config = _cfg(variant="egot2s", primary="A", aux=("B", "C"), epochs=1)
    train_set, val_set = tiny_data["A"]
    train_egot2s(config, tiny_frozen, train_set, val_set)
    after = {t: fb.state_bytes() for t, fb in tiny_frozen.items()}
    assert before == after


def test_egot2s_same_seed_identical_report_and_weights(tiny_frozen, tiny_data):
    config = _cfg(variant="egot2s", primary="A", aux=("B",), epochs=1)
    train_set, val_set = tiny_data["A"]
    t1, r1, _ = train_egot2s(config, tiny_frozen, train_set, val_set)
    t2, r2, _ = train_egot2s(config, tiny_frozen, train_set, val_set)
    assert r1.to_json() == r2.to_json()
    s1 = {k: v.numpy().tobytes() for k, v in t1.state_dict().items()}
    s2 = {k: v.numpy().tobytes() for k, v in t2.state_dict().items()}
    assert s1 == s2


def test_egot2s_span_rule_drops_longer_auxiliaries(tiny_frozen, tiny_data):
    # C's clips last 2s; A and B need 4s and must sit out
    config = _cfg(variant="egot2s", primary="C", aux=("A", "B"), epochs=1)
    train_set, val_set = tiny_data["C"]
    _, report, details = train_egot2s(config, tiny_frozen, train_set, val_set)
    assert details["excluded"] == ["A", "B"]
    assert details["participants"] == ["C"]
    assert report.extra["excluded"] == ["A", "B"]
    assert "loc_error_s" in report.entries["C"]  # frame task reports both metrics


def test_egot2s_rejects_mismatched_dataset(tiny_frozen, tiny_data):
    config = _cfg(variant="egot2s", primary="A")
    train_set, val_set = tiny_data["B"]
    with pytest.raises(IncompatibleError, match="dataset is B"):
        train_egot2s(config, tiny_frozen, train_set, val_set)


def test_egot2s_rejects_wrong_variant(tiny_frozen, tiny_data):
    config = _cfg(variant="finetune", primary="A")
    train_set, val_set = tiny_data["A"]
    with pytest.raises(TrainingError, match="variant"):
        train_egot2s(config, tiny_frozen, train_set, val_set)


def test_egot2s_rejects_primary_that_cannot_eat_its_clips(tiny_suite, tiny_frozen, tiny_data):
    # a backbone wanting 8s can never consume task A's 4s clips
    spec_a = tiny_suite[0]
    long_spec = BackboneSpec(
        task_id="A", arch="tconv", layers=1, width=8, span_s=8.0,
        frame_rate_hz=1.0, modalities=("video",), video_channels=4, audio_channels=0,
    )
    torch.manual_seed(0)
    pool = dict(tiny_frozen)
    pool["A"] = FrozenBackbone(TaskModel(spec_a, long_spec))
    config = _cfg(variant="egot2s", primary="A", epochs=1)
    train_set, val_set = tiny_data["A"]
    with pytest.raises(TrainingError, match="cannot consume its own clips"):
        train_egot2s(config, pool, train_set, val_set)


def test_evaluate_translator_s_matches_training_eval(s_run, tiny_frozen, tiny_data):
    _, (translator, report, details) = s_run
    _, val_set = tiny_data["B"]
    again = evaluate_translator_s(translator, tiny_frozen, val_set)
    assert again.entries == report.entries
    assert again.trainable_params == report.trainable_params


def test_evaluate_translator_s_rejects_other_tasks(s_run, tiny_frozen, tiny_data):
    _, (translator, _, _) = s_run
    _, val_a = tiny_data["A"]
    with pytest.raises(IncompatibleError, match="checkpoint is for B"):
        evaluate_translator_s(translator, tiny_frozen, val_a)


# ---------------------------------------------------------------------------
# Gradient-aggregation linearity
# ---------------------------------------------------------------------------

def _linearity_gap(dtype):
    torch.manual_seed(6)
    suite = micro_suite()
    vocab = build_vocab(suite)
    widths = {"A": 8, "B": 8, "C": 8}
    from egot2.seqgen import TranslatorG

    model = TranslatorG(vocab, widths, _fusion(), DecoderConfig(depth=1, heads=2)).to(dtype)
    parts = {}
    targets = {}
    for i, spec in enumerate(suite):
        labels = list(spec.label_space.labels())
        batch_labels = [labels[j % len(labels)] for j in range(4)]
        seqs = [tokenize(vocab, spec, lab) for lab in batch_labels]
        ids = torch.tensor([s.ids for s in seqs])
        weights = torch.tensor([s.weights for s in seqs], dtype=dtype)
        targets[spec.task_id] = (ids, weights)
        torch.manual_seed(100 + i)
        parts[spec.task_id] = [
            FeaturePart(spec.task_id, torch.randn(4, 6, 8, dtype=dtype), [float(k) for k in range(6)], [0] * 6)
        ]

    def task_loss(t):
        ids, weights = targets[t]
        return model.loss(parts[t], ids, weights)

    tasks = list(parts)
    # single step on the summed loss
    model.zero_grad()
    sum(task_loss(t) for t in tasks).backward()
    summed = {n: p.grad.clone() for n, p in model.named_parameters() if p.grad is not None}
    # per-task backward passes, gradients accumulating
    model.zero_grad()
    for t in tasks:
        task_loss(t).backward()
    accumulated = {n: p.grad.clone() for n, p in model.named_parameters() if p.grad is not None}

    assert summed.keys() == accumulated.keys()
    return max(float((summed[n] - accumulated[n]).abs().max()) for n in summed)


def test_summed_loss_equals_accumulated_gradients_f32():
    assert _linearity_gap(torch.float32) < 1e-6


def test_summed_loss_equals_accumulated_gradients_f64():
    assert _linearity_gap(torch.float64) < 1e-12


# ---------------------------------------------------------------------------
# Task-general translator training
# ---------------------------------------------------------------------------

def test_egot2g_trains_all_tasks_jointly(g_run):
    _, (model, report, details) = g_run
    assert details["tasks"] == ["A", "B"]
    assert set(report.entries) == {"A", "B"}
    for t in ("A", "B"):
        assert 0.0 <= report.get(t, "accuracy") <= 1.0
        curve = report.extra["loss_curves"][t]
        assert len(curve) == 3 and curve[-1] < curve[0]
        assert 0.0 <= report.extra["valid_fraction"][t] <= 1.0
    assert report.trainable_params == trainable_parameter_count(model)
    assert report.trainable_params < report.total_params


def test_egot2g_rejects_unknown_task(tiny_suite, tiny_frozen, tiny_data):
    config = _cfg(variant="egot2g", tasks=("A", "Z"))
    with pytest.raises(TrainingError, match="unknown task"):
        train_egot2g(config, tiny_suite, tiny_frozen, tiny_data)


def test_egot2g_heterogeneous_spans_still_train(tiny_suite, tiny_frozen, tiny_data):
    config = _cfg(variant="egot2g", tasks=("A", "B", "C"), epochs=1)
    model, report, details = train_egot2g(config, tiny_suite, tiny_frozen, tiny_data)
    assert set(report.entries) == {"A", "B", "C"}
    assert "loc_error_s" in report.entries["C"]


def test_evaluate_translator_g(g_run, tiny_suite, tiny_frozen, tiny_data):
    _, (model, report, _) = g_run
    val_sets = {"A": tiny_data["A"][1], "B": tiny_data["B"][1]}
    again = evaluate_translator_g(model, tiny_suite, tiny_frozen, val_sets)
    assert again.entries == report.entries
    assert again.extra["valid_fraction"] == report.extra["valid_fraction"]


def test_evaluate_translator_g_rejects_unknown_task(g_run, tiny_frozen, tiny_data):
    _, (model, _, _) = g_run
    suite = micro_suite()[:2]
    with pytest.raises(IncompatibleError, match="unknown to this checkpoint"):
        evaluate_translator_g(model, suite, tiny_frozen, {"Z": tiny_data["A"][1]})


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

def test_unfreeze_ablation_updates_backbones(tiny_frozen, tiny_data):
    thawed = copy.deepcopy(tiny_frozen)
    before = {t: fb.state_bytes() for t, fb in thawed.items()}
    config = _cfg(variant="egot2s", primary="A", aux=("B",), epochs=1, unfreeze_backbones=True)
    train_set, val_set = tiny_data["A"]
    translator, report, details = train_egot2s(config, thawed, train_set, val_set)
    after = {t: fb.state_bytes() for t, fb in thawed.items()}
    assert before["A"] != after["A"]
    assert before["B"] != after["B"]
    assert before["C"] == after["C"]  # not a participant
    # with backbones in the optimizer everything is trainable
    assert report.trainable_params == report.total_params
    assert report.trainable_params > trainable_parameter_count(translator)


def test_pooled_tokens_ablation_shrinks_token_count(tiny_frozen, tiny_data):
    config = _cfg(variant="egot2s", primary="A", aux=("B",), epochs=1, temporal_pool_tokens=True)
    train_set, val_set = tiny_data["A"]
    translator, report, _ = train_egot2s(config, tiny_frozen, train_set, val_set)
    assert translator.config.pool_tokens
    assert 0.0 <= report.get("A", "accuracy") <= 1.0


def test_primary_copy_ablation_builds_retrained_twins(tiny_frozen, tiny_data):
    train_set, val_set = tiny_data["B"]
    config = _cfg(
        variant="egot2s", primary="B", aux=("A", "C"), epochs=1,
        replace_aux_with_primary_copies=True,
    )
    with pytest.raises(TrainingError, match="copy_recipe"):
        train_egot2s(config, tiny_frozen, train_set, val_set)

    recipe = {"train_set": train_set, "lr": 1e-2, "epochs": 1, "batch_size": 16}
    translator, report, details = train_egot2s(
        config, tiny_frozen, train_set, val_set, copy_recipe=recipe
    )
    assert details["participants"] == ["B", "B#copy1", "B#copy2"]
    twins = details["frozen"]
    assert twins["B#copy1"].state_bytes() != twins["B"].state_bytes()
    assert twins["B#copy1"].state_bytes() != twins["B#copy2"].state_bytes()
    assert twins["B#copy1"].spec.width == twins["B"].spec.width


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def test_finetune_probe_on_own_features(tiny_frozen, tiny_data):
    config = _cfg(variant="finetune", primary="A", epochs=2)
    train_set, val_set = tiny_data["A"]
    probe, report, _ = run_baseline(config, tiny_frozen, train_set, val_set)
    assert report.extra["sources"] == ["A"]
    assert 0.0 <= report.get("A", "accuracy") <= 1.0
    assert "mAP" in report.entries["A"]  # binary task also reports ranking quality
    assert report.trainable_params == trainable_parameter_count(probe)
    assert report.trainable_params < report.total_params


def test_transfer_probe_uses_foreign_features(tiny_frozen, tiny_data):
    config = _cfg(variant="transfer", primary="B", transfer_source="A", epochs=2)
    train_set, val_set = tiny_data["B"]
    _, report, _ = run_baseline(config, tiny_frozen, train_set, val_set)
    assert report.extra["sources"] == ["A"]
    assert report.extra["variant"] == "transfer"


def test_transfer_with_unusable_source_fails_loud(tiny_frozen, tiny_data):
    # A's backbone needs 4s; C's clips last 2s
    config = _cfg(variant="transfer", primary="C", transfer_source="A", epochs=1)
    train_set, val_set = tiny_data["C"]
    with pytest.raises(TrainingError, match="all feature sources excluded"):
        run_baseline(config, tiny_frozen, train_set, val_set)


def test_late_fusion_concatenates_all_sources(tiny_frozen, tiny_data):
    train_set, val_set = tiny_data["B"]
    lf = _cfg(variant="late_fusion", primary="B", aux=("A", "C"), epochs=2)
    probe_lf, report_lf, _ = run_baseline(lf, tiny_frozen, train_set, val_set)
    assert report_lf.extra["sources"] == ["B", "A", "C"]

    ft = _cfg(variant="finetune", primary="B", epochs=2)
    probe_ft, report_ft, _ = run_baseline(ft, tiny_frozen, train_set, val_set)
    # wider concatenated input -> strictly more probe parameters
    assert report_lf.trainable_params > report_ft.trainable_params


def test_baseline_requires_val_set_and_matching_dataset(tiny_frozen, tiny_data):
    config = _cfg(variant="finetune", primary="A")
    train_set, val_set = tiny_data["A"]
    with pytest.raises(TrainingError, match="validation set"):
        run_baseline(config, tiny_frozen, train_set, None)
    other_train, other_val = tiny_data["B"]
    with pytest.raises(IncompatibleError, match="dataset is B"):
        run_baseline(config, tiny_frozen, other_train, other_val)


def test_mtl_hard_sharing_trains_equal_arch_tasks(
    tiny_suite, tiny_frozen, tiny_data, tiny_backbone_specs
):
    config = _cfg(variant="mtl_hard_share", tasks=("A", "B"), epochs=2)
    model, report, _ = run_baseline(
        config, tiny_frozen, tiny_data, backbone_specs=tiny_backbone_specs, suite=tiny_suite
    )
    assert set(report.entries) == {"A", "B"}
    assert report.trainable_params == report.total_params  # everything is shared + trained
    assert report.extra["tasks"] == ["A", "B"]


def test_mtl_rejects_heterogeneous_architectures(
    tiny_suite, tiny_frozen, tiny_data, tiny_backbone_specs
):
    config = _cfg(variant="mtl_hard_share", tasks=("A", "C"), epochs=1)
    with pytest.raises(IncompatibleError, match="span_s"):
        run_baseline(
            config, tiny_frozen, tiny_data, backbone_specs=tiny_backbone_specs, suite=tiny_suite
        )


def test_mtl_requires_suite_and_specs(tiny_frozen, tiny_data):
    config = _cfg(variant="mtl_hard_share", tasks=("A", "B"), epochs=1)
    with pytest.raises(TrainingError, match="suite and backbone_specs"):
        run_baseline(config, tiny_frozen, tiny_data)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_translator_s_checkpoint_round_trip(s_run, tiny_frozen, tiny_data, tmp_path):
    _, (translator, report, _) = s_run
    path = str(tmp_path / "s.egt2")
    save_translator(translator, path, extra_meta={"note": "unit"})
    loaded, meta = load_translator(path)
    assert meta["kind"] == "egot2s" and meta["note"] == "unit"
    orig = {k: v.numpy().tobytes() for k, v in translator.state_dict().items()}
    back = {k: v.numpy().tobytes() for k, v in loaded.state_dict().items()}
    assert orig == back
    _, val_set = tiny_data["B"]
    again = evaluate_translator_s(loaded, tiny_frozen, val_set)
    assert again.entries == report.entries


def test_translator_g_checkpoint_round_trip(g_run, tiny_suite, tiny_frozen, tiny_data, tmp_path):
    _, (model, report, _) = g_run
    path = str(tmp_path / "g.egt2")
    save_translator(model, path)
    loaded, meta = load_translator(path)
    assert meta["kind"] == "egot2g"
    assert loaded.vocab.tokens == model.vocab.tokens
    orig = {k: v.numpy().tobytes() for k, v in model.state_dict().items()}
    back = {k: v.numpy().tobytes() for k, v in loaded.state_dict().items()}
    assert orig == back
    val_sets = {"A": tiny_data["A"][1], "B": tiny_data["B"][1]}
    again = evaluate_translator_g(loaded, tiny_suite, tiny_frozen, val_sets)
    assert again.entries == report.entries


def test_load_translator_rejects_other_kinds(tmp_path):
    path = str(tmp_path / "other.egt2")
    container.write_arrays(path, {"w": np.zeros(3)}, {"kind": "backbone"})
    with pytest.raises(TrainingError, match="not a translator checkpoint"):
        load_translator(path)


def test_load_translator_rejects_arch_mismatch(s_run, tmp_path):
    _, (translator, _, _) = s_run
    path = str(tmp_path / "s.egt2")
    save_translator(translator, path)
    arrays, meta = container.read_arrays(path)
    dropped = dict(arrays)
    dropped.pop(sorted(arrays)[0])
    tampered = str(tmp_path / "tampered.egt2")
    container.write_arrays(tampered, dropped, meta)
    with pytest.raises(TrainingError, match="missing="):
        load_translator(tampered)
