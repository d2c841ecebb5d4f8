import copy
from pathlib import Path

import numpy as np
import pytest
import torch

from ssowod.config import validate_config

ROOT = Path(__file__).resolve().parents[1]

TINY = {
    "name": "tiny",
    "seed": 0,
    "detector": {"num_queries": 12, "embed_dim": 32, "input_size": 32, "enc_layers": 1, "dec_layers": 1,
                 "backbone_width": 16, "num_heads": 2},
    "optim": {"lr": 5e-4, "epochs": 1, "align_epochs": 1, "finetune_epochs": 1, "batch_size": 4, "grad_clip": 1.0},
    "pseudo": {"k": 2},
    "eval": {"top_k": 5},
    "data": {
        "synthetic": {"num_classes": 4, "num_images": 24, "num_test_images": 8},
        "schedule": [
            {"classes": ["square", "circle"], "fraction": 1.0},
            {"classes": ["triangle", "cross"], "fraction": 0.5},
        ],
    },
}


def rel_err(a, b):
    """Elementwise |a - b| / max(|a|, |b|, 1e-6), maximum over entries."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)))


@pytest.fixture
def tiny_dict():
    return copy.deepcopy(TINY)


@pytest.fixture
def tiny_cfg():
    return validate_config(copy.deepcopy(TINY))


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


ACCEPTANCE: dict[str, str] = {}


def record(criterion: str, ok: bool, detail: str = "") -> bool:
    """Store (and print) one acceptance verdict line."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: (int("".join(c for c in k if c.isdigit())), k)):
            terminalreporter.write_line(ACCEPTANCE[key])
