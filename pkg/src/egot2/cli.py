"""Command-line entry point binding every stage of the pipeline.

Commands: ``gen-data`` (synthesize all suite datasets), ``train-backbone``
(stage I, one task, one checkpoint file), ``train`` (any variant into a run
directory), ``eval``, ``analyze``, and ``generate`` (single-sample sequence
prediction).

Exit codes: 0 success, 2 configuration/usage error, 3 missing prerequisite,
4 incompatibility.  The final stderr line is always machine-parseable:
``code=<n> reason=<slug>``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import time

import numpy as np
import torch

from . import __version__, container
from .analysis import (
    AnalysisError,
    capture_s,
    emit_report,
    relation_matrix_g,
    relation_row_s,
    save_capture,
)
from .backbone import (
    BackboneError,
    FrozenBackbone,
    load_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, ExperimentConfig, RunManifest, load_config
from .container import FormatError
from .fusion import FusionError
from .metrics import MetricError, MetricReport
from .seeding import derive_seed
from .seqgen import Incorrect, SeqError, detokenize
from .suite import (
    Dataset,
    Sample,
    SuiteError,
    generate_dataset,
    load_dataset,
    save_dataset,
    split,
)
from .training import (
    IncompatibleError,
    TrainingError,
    evaluate_translator_g,
    evaluate_translator_s,
    load_translator,
    run_baseline,
    save_translator,
    train_egot2g,
    train_egot2s,
    train_task_model,
)

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_INCOMPATIBLE = 4

CLI_VARIANTS = ("backbone", "egot2s", "egot2g", "finetune", "transfer", "late_fusion", "mtl")
_VARIANT_MAP = {"mtl": "mtl_hard_share"}


class CliError(Exception):
    def __init__(self, code: int, message: str, reason: str = "error"):
        super().__init__(message)
        self.code = code
        self.reason = reason


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        print("code=2 reason=usage", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _log(args, message: str) -> None:
    if getattr(args, "verbose", False):
        print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _dir_digest(path: str) -> str:
    """One hash over every file in a directory tree (sorted relative paths)."""
    h = hashlib.sha256()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            h.update(os.path.relpath(full, path).encode())
            h.update(container.file_digest(full).encode())
    return h.hexdigest()


def _input_digest(path: str) -> str:
    return _dir_digest(path) if os.path.isdir(path) else container.file_digest(path)


def _load_split(data_dir: str, task_id: str, split_name: str) -> Dataset:
    path = os.path.join(data_dir, task_id, split_name)
    if not os.path.isdir(path):
        raise CliError(EXIT_MISSING, f"missing dataset: {path} (run gen-data first)", "missing-data")
    return load_dataset(path)


def _backbone_ckpt_path(ckpt_dir: str, task_id: str) -> str | None:
    for name in (f"backbone_{task_id}.egt2", f"{task_id}.egt2"):
        path = os.path.join(ckpt_dir, name)
        if os.path.exists(path):
            return path
    return None


def _load_backbones(ckpt_dir: str | None, tasks: list[str]) -> tuple[dict[str, FrozenBackbone], dict[str, str]]:
    """Frozen stage-I models for ``tasks``; exit 3 listing whatever is absent."""
    if ckpt_dir is None:
        raise CliError(EXIT_MISSING, f"missing stage-I checkpoints for tasks: {', '.join(tasks)} (pass --ckpts)", "missing-ckpts")
    missing = [t for t in tasks if _backbone_ckpt_path(ckpt_dir, t) is None]
    if missing:
        raise CliError(
            EXIT_MISSING,
            f"missing stage-I checkpoints in {ckpt_dir}: {', '.join(sorted(missing))}",
            "missing-ckpts",
        )
    models, paths = {}, {}
    for t in tasks:
        path = _backbone_ckpt_path(ckpt_dir, t)
        model, meta = load_checkpoint(path)
        if meta["task_id"] != t:
            raise CliError(EXIT_INCOMPATIBLE, f"{path} holds task {meta['task_id']!r}, wanted {t!r}", "task-mismatch")
        models[t] = FrozenBackbone(model)
        paths[t] = path
    return models, paths


def _make_run_dir(out: str) -> str:
    os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(out, "attention"), exist_ok=True)
    return out


def _write_config_snapshot(run_dir: str, cfg: ExperimentConfig, variant: str, seed: int) -> None:
    doc = dict(cfg.raw)
    doc["train"] = {**doc.get("train", {}), "variant": variant, "seed": seed}
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        fh.write(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _write_report(report: MetricReport, out_dir: str, stem: str = "metrics") -> list[str]:
    json_path = os.path.join(out_dir, f"{stem}.json")
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    with open(json_path, "w") as fh:
        fh.write(report.to_json())
    with open(csv_path, "w") as fh:
        fh.write(report.to_csv())
    return [json_path, csv_path]


def _print_report(report: MetricReport) -> None:
    for task_id in sorted(report.entries):
        cells = ", ".join(f"{m}={v:.4f}" for m, v in sorted(report.entries[task_id].items()))
        print(f"{task_id}: {cells}")


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else 0
    manifest = RunManifest(
        command="gen-data",
        config=cfg.raw,
        seed=seed,
        inputs={args.config: _input_digest(args.config)},
    )
    for spec in cfg.suite:
        manifest.seeds[f"data/{spec.task_id}"] = derive_seed(seed, "data", spec.task_id)
        manifest.seeds[f"split/{spec.task_id}"] = derive_seed(seed, "split", spec.task_id)
    os.makedirs(args.out, exist_ok=True)
    manifest.write(args.out)

    for spec in cfg.suite:
        n = cfg.data.n_for(spec.task_id)
        dataset = generate_dataset(spec, cfg.synergy, n, manifest.seeds[f"data/{spec.task_id}"])
        parts = split(dataset, cfg.data.ratios, manifest.seeds[f"split/{spec.task_id}"])
        for split_name, part in zip(("train", "val", "test"), parts):
            path = os.path.join(args.out, spec.task_id, split_name)
            save_dataset(part, path)
            manifest.artifacts.append(os.path.relpath(path, args.out))
        print(f"{spec.task_id}: n={n} train={len(parts[0])} val={len(parts[1])} test={len(parts[2])}")
    manifest.write(args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-backbone
# ---------------------------------------------------------------------------

def _stage_datasets(cfg: ExperimentConfig, data_dir: str | None, tasks: list[str], seed: int):
    """(train, val) per task, loaded from gen-data output or synthesized."""
    out = {}
    for spec in cfg.suite:
        if spec.task_id not in tasks:
            continue
        if data_dir is not None:
            out[spec.task_id] = (
                _load_split(data_dir, spec.task_id, "train"),
                _load_split(data_dir, spec.task_id, "val"),
            )
        else:
            dataset = generate_dataset(
                spec, cfg.synergy, cfg.data.n_for(spec.task_id), derive_seed(seed, "data", spec.task_id)
            )
            train, val, _ = split(dataset, cfg.data.ratios, derive_seed(seed, "split", spec.task_id))
            out[spec.task_id] = (train, val)
    return out


def cmd_train_backbone(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else 0
    by_id = {s.task_id: s for s in cfg.suite}
    if args.task not in by_id:
        raise CliError(EXIT_CONFIG, f"task {args.task!r} not in the configured suite", "unknown-task")
    datasets = _stage_datasets(cfg, args.data, [args.task], seed)
    train_set, val_set = datasets[args.task]
    _log(args, f"training backbone {args.task} on {len(train_set)} clips")
    model, meta = train_task_model(
        by_id[args.task],
        cfg.backbones[args.task],
        train_set,
        val_set,
        lr=cfg.stage1.lr,
        epochs=cfg.stage1.epochs,
        batch_size=cfg.stage1.batch_size,
        seed=derive_seed(seed, "stage1", args.task),
    )
    meta["config"] = cfg.raw
    meta["base_seed"] = seed
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    save_checkpoint(model, args.out, meta)
    print(f"{args.task}: val_accuracy={meta['final_val_accuracy']:.4f} -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _needed_tasks(variant: str, train_cfg) -> tuple[list[str], list[str]]:
    """(dataset tasks, checkpoint tasks) for a stage-II/baseline variant."""
    if variant == "egot2s":
        ckpts = [train_cfg.primary] + [t for t in train_cfg.aux if t != train_cfg.primary]
        if train_cfg.replace_aux_with_primary_copies:
            ckpts = [train_cfg.primary]
        return [train_cfg.primary], ckpts
    if variant == "egot2g":
        return list(train_cfg.tasks), list(train_cfg.tasks)
    if variant == "finetune":
        return [train_cfg.primary], [train_cfg.primary]
    if variant == "transfer":
        return [train_cfg.primary], [train_cfg.transfer_source]
    if variant == "late_fusion":
        return [train_cfg.primary], [train_cfg.primary] + [t for t in train_cfg.aux if t != train_cfg.primary]
    if variant == "mtl_hard_share":
        return list(train_cfg.tasks), []
    raise CliError(EXIT_CONFIG, f"unknown variant {variant!r}", "unknown-variant")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    variant = _VARIANT_MAP.get(args.variant, args.variant)
    run_dir = _make_run_dir(args.out)
    t0 = time.monotonic()

    if variant == "backbone":
        seed = args.seed if args.seed is not None else 0
        _write_config_snapshot(run_dir, cfg, "backbone", seed)
        manifest = RunManifest(command="train backbone", config=cfg.raw, seed=seed)
        if args.data:
            manifest.inputs[args.data] = _input_digest(args.data)
        for spec in cfg.suite:
            manifest.seeds[f"stage1/{spec.task_id}"] = derive_seed(seed, "stage1", spec.task_id)
        manifest.write(run_dir)

        tasks = [s.task_id for s in cfg.suite]
        datasets = _stage_datasets(cfg, args.data, tasks, seed)
        report = MetricReport(trainable_params=0, total_params=0)
        by_id = {s.task_id: s for s in cfg.suite}
        for t in tasks:
            train_set, val_set = datasets[t]
            _log(args, f"stage I: {t} ({len(train_set)} clips)")
            model, meta = train_task_model(
                by_id[t],
                cfg.backbones[t],
                train_set,
                val_set,
                lr=cfg.stage1.lr,
                epochs=cfg.stage1.epochs,
                batch_size=cfg.stage1.batch_size,
                seed=manifest.seeds[f"stage1/{t}"],
            )
            path = os.path.join(run_dir, "checkpoints", f"backbone_{t}.egt2")
            save_checkpoint(model, path, meta)
            manifest.artifacts.append(os.path.relpath(path, run_dir))
            n_params = sum(p.numel() for p in model.parameters())
            report.trainable_params += n_params
            report.total_params += n_params
            report.add(t, "accuracy", meta["final_val_accuracy"])
        report.extra = {"variant": "backbone", "tasks": tasks}
        for path in _write_report(report, run_dir):
            manifest.artifacts.append(os.path.relpath(path, run_dir))
        manifest.extra["wall_clock_s"] = time.monotonic() - t0
        manifest.write(run_dir)
        _print_report(report)
        return EXIT_OK

    # Stage-II variants and baselines.
    train_cfg = cfg.train_config(variant=variant, seed=args.seed)
    seed = train_cfg.seed
    if args.data is None:
        raise CliError(EXIT_MISSING, "this variant needs --data (gen-data output)", "missing-data")
    data_tasks, ckpt_tasks = _needed_tasks(variant, train_cfg)

    backbones, ckpt_paths = ({}, {})
    if ckpt_tasks:
        backbones, ckpt_paths = _load_backbones(args.ckpts, ckpt_tasks)

    _write_config_snapshot(run_dir, cfg, variant, seed)
    manifest = RunManifest(command=f"train {variant}", config=cfg.raw, seed=seed)
    manifest.seeds["train"] = seed
    manifest.inputs[args.data] = _input_digest(args.data)
    for t, path in ckpt_paths.items():
        manifest.inputs[path] = _input_digest(path)
    manifest.write(run_dir)  # before any checkpoint

    datasets = {t: (_load_split(args.data, t, "train"), _load_split(args.data, t, "val")) for t in data_tasks}
    artifacts: list[str] = []

    if variant == "egot2s":
        train_set, val_set = datasets[train_cfg.primary]
        copy_recipe = None
        if train_cfg.replace_aux_with_primary_copies:
            copy_recipe = {
                "train_set": train_set,
                "lr": cfg.stage1.lr,
                "epochs": cfg.stage1.epochs,
                "batch_size": cfg.stage1.batch_size,
            }
        model, report, details = train_egot2s(train_cfg, backbones, train_set, val_set, copy_recipe=copy_recipe)
        ckpt = os.path.join(run_dir, "checkpoints", "translator.egt2")
        save_translator(
            model,
            ckpt,
            extra_meta={
                "stride_s": train_cfg.stride_s,
                "backbone_files": {t: f"backbone_{t}.egt2" for t in details["participants"] if t in ckpt_paths},
            },
        )
        artifacts.append(ckpt)
        for t in details["participants"]:
            if t in ckpt_paths:
                dest = os.path.join(run_dir, "checkpoints", f"backbone_{t}.egt2")
                if os.path.abspath(ckpt_paths[t]) != os.path.abspath(dest):
                    shutil.copyfile(ckpt_paths[t], dest)
                artifacts.append(dest)
        if cfg.capture_attention:
            _log(args, "capturing attention over the validation set")
            capture = capture_s(model, details["frozen"], val_set, train_cfg.stride_s)
            matrix = relation_row_s(capture)
            with open(os.path.join(run_dir, "attention", "relations.json"), "w") as fh:
                fh.write(matrix.to_json())
            save_capture(os.path.join(run_dir, "attention", "capture.egt2"), capture)
            artifacts += [os.path.join(run_dir, "attention", "relations.json"),
                          os.path.join(run_dir, "attention", "capture.egt2")]

    elif variant == "egot2g":
        model, report, details = train_egot2g(train_cfg, cfg.suite, backbones, datasets)
        ckpt = os.path.join(run_dir, "checkpoints", "translator.egt2")
        save_translator(
            model,
            ckpt,
            extra_meta={
                "stride_s": train_cfg.stride_s,
                "backbone_files": {t: f"backbone_{t}.egt2" for t in model.participants if t in ckpt_paths},
            },
        )
        artifacts.append(ckpt)
        for t in model.participants:
            if t in ckpt_paths:
                dest = os.path.join(run_dir, "checkpoints", f"backbone_{t}.egt2")
                if os.path.abspath(ckpt_paths[t]) != os.path.abspath(dest):
                    shutil.copyfile(ckpt_paths[t], dest)
                artifacts.append(dest)
        if cfg.capture_attention:
            _log(args, "capturing decoder cross-attention per task")
            suite_subset = [s for s in cfg.suite if s.task_id in model.participants]
            matrix = relation_matrix_g(
                model, suite_subset, backbones, {t: datasets[t][1] for t in model.participants}, train_cfg.stride_s
            )
            with open(os.path.join(run_dir, "attention", "relations.json"), "w") as fh:
                fh.write(matrix.to_json())
            artifacts.append(os.path.join(run_dir, "attention", "relations.json"))

    elif variant == "mtl_hard_share":
        model, report, _ = run_baseline(
            train_cfg, {}, datasets, backbone_specs=cfg.backbones, suite=cfg.suite
        )
        ckpt = os.path.join(run_dir, "checkpoints", "model.egt2")
        arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
        container.write_arrays(ckpt, arrays, {"kind": "baseline", "variant": variant})
        artifacts.append(ckpt)

    else:  # finetune / transfer / late_fusion
        train_set, val_set = datasets[train_cfg.primary]
        model, report, _ = run_baseline(train_cfg, backbones, train_set, val_set)
        ckpt = os.path.join(run_dir, "checkpoints", "model.egt2")
        arrays = {k: v.detach().numpy() for k, v in model.state_dict().items()}
        container.write_arrays(ckpt, arrays, {"kind": "baseline", "variant": variant})
        artifacts.append(ckpt)

    artifacts += _write_report(report, run_dir)
    manifest.artifacts = [os.path.relpath(p, run_dir) for p in artifacts]
    manifest.extra["wall_clock_s"] = report.wall_clock_s if report.wall_clock_s else time.monotonic() - t0
    manifest.write(run_dir)
    _print_report(report)
    print(f"run written to {run_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _resolve_backbones_for_ckpt(ckpt_path: str, meta: dict, override_dir: str | None):
    files = meta.get("backbone_files", {})
    base = override_dir or os.path.dirname(os.path.abspath(ckpt_path))
    tasks = sorted(files)
    if override_dir is not None:
        return _load_backbones(override_dir, tasks)
    missing = [t for t in tasks if not os.path.exists(os.path.join(base, files[t]))]
    if missing:
        raise CliError(
            EXIT_MISSING,
            f"missing stage-I checkpoints next to {ckpt_path}: {', '.join(missing)} (pass --ckpts)",
            "missing-ckpts",
        )
    models, paths = {}, {}
    for t in tasks:
        path = os.path.join(base, files[t])
        model, bb_meta = load_checkpoint(path)
        if bb_meta["task_id"] != t:
            raise CliError(EXIT_INCOMPATIBLE, f"{path} holds task {bb_meta['task_id']!r}, wanted {t!r}", "task-mismatch")
        models[t] = FrozenBackbone(model)
        paths[t] = path
    return models, paths


def cmd_eval(args) -> int:
    if not os.path.exists(args.ckpt):
        raise CliError(EXIT_MISSING, f"checkpoint not found: {args.ckpt}", "missing-ckpt")
    model, meta = load_translator(args.ckpt)
    stride = float(meta.get("stride_s", 8.0))
    backbones, _ = _resolve_backbones_for_ckpt(args.ckpt, meta, args.ckpts)
    unresolved = [t for t in model.participants if t not in backbones]
    if unresolved:
        raise CliError(
            EXIT_MISSING,
            f"no stage-I checkpoints for participants: {', '.join(unresolved)}",
            "missing-ckpts",
        )
    out_dir = args.out or os.path.dirname(os.path.dirname(os.path.abspath(args.ckpt)))
    os.makedirs(out_dir, exist_ok=True)

    if meta["kind"] == "egot2s":
        val_set = _load_split(args.data, model.primary.task_id, args.split)
        report = evaluate_translator_s(model, backbones, val_set, stride)
    else:
        suite = list(model.vocab.tasks.values())
        datasets = {s.task_id: _load_split(args.data, s.task_id, args.split) for s in suite}
        report = evaluate_translator_g(model, suite, backbones, datasets, stride)

    paths = _write_report(report, out_dir, stem=f"metrics_{args.split}")
    _print_report(report)
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze / generate
# ---------------------------------------------------------------------------

def cmd_analyze(args) -> int:
    if not os.path.isdir(args.run):
        raise CliError(EXIT_MISSING, f"run directory not found: {args.run}", "missing-run")
    written = emit_report(args.run, args.out)
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_generate(args) -> int:
    if not os.path.exists(args.ckpt):
        raise CliError(EXIT_MISSING, f"checkpoint not found: {args.ckpt}", "missing-ckpt")
    model, meta = load_translator(args.ckpt)
    if meta["kind"] != "egot2g":
        raise CliError(EXIT_INCOMPATIBLE, "generate needs a sequence-decoding (egot2g) checkpoint", "wrong-kind")
    if args.task not in model.vocab.tasks:
        raise CliError(
            EXIT_INCOMPATIBLE,
            f"task {args.task!r} unknown to this checkpoint (has {', '.join(model.vocab.tasks)})",
            "task-mismatch",
        )
    if not os.path.exists(args.input):
        raise CliError(EXIT_MISSING, f"input sample not found: {args.input}", "missing-input")
    arrays, _sample_meta = container.read_arrays(args.input)
    if "video" not in arrays:
        raise CliError(EXIT_INCOMPATIBLE, "input sample must contain a 'video' array", "bad-input")

    backbones, _ = _resolve_backbones_for_ckpt(args.ckpt, meta, args.ckpts)
    spec = model.vocab.tasks[args.task]
    sample_arrays = {k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()}
    probe_set = Dataset(spec=spec, samples=[Sample(arrays=sample_arrays, label=None, clip_id="input")])

    from .training import _g_participants, precompute_parts

    participants = [
        t for t in _g_participants(spec, [model.vocab.tasks[t] for t in model.vocab.tasks], backbones)
        if t in model.participants
    ]
    parts, _ = precompute_parts(probe_set, backbones, participants, float(meta.get("stride_s", 8.0)))
    with torch.no_grad():
        ids = model.generate_ids(parts, args.task)
    result = detokenize(model.vocab, spec, [int(i) for i in ids[0]])
    if isinstance(result, Incorrect):
        print(f"Incorrect(reason={result.reason})")
    else:
        print(result)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="base seed (overrides config)")
    common.add_argument("--verbose", action="store_true", help="progress details on stderr")

    parser = _Parser(prog="egot2", description="Task-translation experiments on a synthetic multi-task suite.")
    parser.add_argument("--version", action="version", version=f"egot2 {__version__}")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate every suite dataset + splits")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-backbone", parents=[common], help="stage I for one task -> checkpoint file")
    p.add_argument("--task", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--data", default=None, help="gen-data output dir (default: synthesize from config)")
    p.add_argument("--out", required=True, help="checkpoint file path")
    p.set_defaults(func=cmd_train_backbone)

    p = sub.add_parser("train", parents=[common], help="train any variant into a run directory")
    p.add_argument("--variant", required=True, choices=CLI_VARIANTS)
    p.add_argument("--config", required=True)
    p.add_argument("--data", default=None, help="gen-data output dir")
    p.add_argument("--ckpts", default=None, help="dir with stage-I checkpoints (backbone_<task>.egt2)")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a translator checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--ckpts", default=None, help="override dir for stage-I checkpoints")
    p.add_argument("--out", default=None, help="report directory (default: run dir of the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", parents=[common], help="render attention reports for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("generate", parents=[common], help="decode one sample with a task prompt")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--input", required=True, help="named-array container with the clip's arrays")
    p.add_argument("--ckpts", default=None, help="override dir for stage-I checkpoints")
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        code = args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"code={exc.code} reason={exc.reason}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"code={EXIT_CONFIG} reason=config field={exc.field}", file=sys.stderr)
        return EXIT_CONFIG
    except IncompatibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"code={EXIT_INCOMPATIBLE} reason=incompatible", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except (TrainingError, SuiteError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"code={EXIT_CONFIG} reason=config", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"code={EXIT_MISSING} reason=missing", file=sys.stderr)
        return EXIT_MISSING
    except (AnalysisError, FormatError, BackboneError, FusionError, SeqError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"code={EXIT_INCOMPATIBLE} reason=incompatible", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    print(f"code={code}", file=sys.stderr)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
