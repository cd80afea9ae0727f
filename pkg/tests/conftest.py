"""Shared fixtures: a tiny 3-task world that trains in seconds.

Session-scoped fixtures hold the expensive artifacts (datasets, stage-I
models) so the unit tests can exercise fusion/training/analysis code paths
without each re-running stage I.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from egot2.backbone import BackboneSpec, FrozenBackbone
from egot2.suite import (
    BinarySpace,
    CategoricalSpace,
    FrameIndexSpace,
    SynergySpec,
    TaskSpec,
    generate_dataset,
    split,
)
from egot2.training import run_stage1


def micro_suite() -> list[TaskSpec]:
    """Three tiny tasks: two spans, three label-space kinds."""
    return [
        TaskSpec("A", "<A>", ("video",), 4.0, 1.0, BinarySpace(), "c0"),
        TaskSpec("B", "<B>", ("video",), 4.0, 1.0, CategoricalSpace(3), "c0"),
        TaskSpec("C", "<C>", ("video",), 2.0, 4.0, FrameIndexSpace(8), "c0"),
    ]


def micro_synergy() -> SynergySpec:
    return SynergySpec(
        n_latents=2,
        task_dependency={"A": (0,), "B": (0, 1), "C": (1,)},
        noise_sigma=0.1,
        video_channels=4,
    )


def micro_backbones() -> dict[str, BackboneSpec]:
    out = {}
    for spec in micro_suite():
        out[spec.task_id] = BackboneSpec(
            task_id=spec.task_id,
            arch="tconv",
            layers=1,
            width=8,
            span_s=spec.span_s,
            frame_rate_hz=spec.frame_rate_hz,
            modalities=spec.modalities,
            video_channels=4,
            audio_channels=0,
        )
    return out


@pytest.fixture(scope="session")
def tiny_suite():
    return micro_suite()


@pytest.fixture(scope="session")
def tiny_synergy():
    return micro_synergy()


@pytest.fixture(scope="session")
def tiny_backbone_specs():
    return micro_backbones()


@pytest.fixture(scope="session")
def tiny_data(tiny_suite, tiny_synergy):
    """task -> (train, val) with 32/16 clips each."""
    out = {}
    for spec in tiny_suite:
        ds = generate_dataset(spec, tiny_synergy, 64, seed=11)
        train, val, _ = split(ds, (0.5, 0.25, 0.25), seed=12)
        out[spec.task_id] = (train, val)
    return out


@pytest.fixture(scope="session")
def tiny_frozen(tiny_suite, tiny_backbone_specs, tiny_data):
    """Frozen stage-I backbones for the tiny suite (3 quick epochs)."""
    trained = run_stage1(
        tiny_suite, tiny_backbone_specs, tiny_data, seed=7, lr=1e-2, epochs=3, batch_size=16
    )
    return {t: FrozenBackbone(model) for t, (model, _meta) in trained.items()}


def micro_config_doc() -> dict:
    """JSON document describing the tiny 3-task world, for config/CLI tests."""
    return {
        "version": 1,
        "suite": {
            "tasks": [
                {
                    "task_id": "A", "prompt_token": "<A>", "modalities": ["video"],
                    "span_s": 4.0, "frame_rate_hz": 1.0, "label_space": {"kind": "binary"},
                },
                {
                    "task_id": "B", "prompt_token": "<B>", "modalities": ["video"],
                    "span_s": 4.0, "frame_rate_hz": 1.0,
                    "label_space": {"kind": "categorical", "n_classes": 3},
                },
                {
                    "task_id": "C", "prompt_token": "<C>", "modalities": ["video"],
                    "span_s": 2.0, "frame_rate_hz": 4.0,
                    "label_space": {"kind": "frame_index", "n_frames": 8},
                },
            ]
        },
        "synergy": {
            "n_latents": 2,
            "task_dependency": {"A": [0], "B": [0, 1], "C": [1]},
            "noise_sigma": 0.1,
            "video_channels": 4,
        },
        "data": {"n": 48, "ratios": [0.5, 0.25, 0.25]},
        "backbones": {t: {"arch": "tconv", "layers": 1, "width": 8} for t in ("A", "B", "C")},
        "stage1": {"lr": 0.01, "epochs": 2, "batch_size": 16},
        "fusion": {"width": 16, "depth": 1, "heads": 2, "capture_attention": True},
        "decoder": {"depth": 1, "heads": 2, "max_len": 6},
        "train": {
            "variant": "egot2s", "primary": "B", "aux": ["A", "C"],
            "tasks": ["A", "B", "C"], "transfer_source": "A",
            "epochs": 2, "batch_size": 16, "seed": 0,
        },
    }


@pytest.fixture
def rng():
    return np.random.default_rng(0)
