from __future__ import annotations

import pytest
import torch

from forada.config import resolve
from forada.dataprep.prepare import prepare_dataset
from forada.dataprep.synth import write_synthetic_dataset

# criterion name -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}

TINY = [
    "backbone.visual.num_layers=4", "backbone.visual.width=32", "backbone.visual.heads=2",
    "backbone.visual.embed_dim=16", "backbone.visual.tap_layers=[1,2,3]", "backbone.visual.refine_layer=2",
    "backbone.visual.patch_size=8", "backbone.visual.input_side=32",
    "adapter.num_layers=6", "adapter.embed_dim=24", "adapter.heads=2", "adapter.num_query=8",
    "adapter.head_dim=16", "adapter.conv_hidden=8", "adapter.patch_size=8", "adapter.input_side=32",
    "adapter.fusion_map={1: 1, 2: 2, 3: 3}",
    "backbone.text.num_layers=1", "backbone.text.width=16", "backbone.text.heads=2",
    "backbone.text.context_length=24", "backbone.text.vocab_size=16", "backbone.text.suffix_len=2",
    "data.target_side=32", "batch_size=8", "checkpoint_every=0",
]


def tiny_config(*overrides, mode: str = "forada"):
    """A few-thousand-parameter model on a 4x4 token grid for fast unit tests."""
    return resolve(preset="desk", overrides=TINY + [f"mode={mode}", *overrides])


@pytest.fixture(autouse=True)
def _restore_determinism():
    before = torch.are_deterministic_algorithms_enabled()
    yield
    torch.use_deterministic_algorithms(before)


@pytest.fixture(scope="session")
def synth_raw(tmp_path_factory):
    out = tmp_path_factory.mktemp("raw")
    write_synthetic_dataset(out, 12, seed=3, side=64)
    return out


@pytest.fixture(scope="session")
def prepared(synth_raw, tmp_path_factory):
    """Manifest for 12 synthetic pairs prepared at the tiny config's resolution."""
    cfg = tiny_config()
    out = tmp_path_factory.mktemp("prepared")
    manifest, problems = prepare_dataset(synth_raw, out, cfg.data, cfg.target_side, cfg.adapter.patch_size)
    assert problems == []
    return manifest


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
