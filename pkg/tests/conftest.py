import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from matmamba.models import ModelConfig, init_params  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "data"


def tiny_lm_config(**kw) -> ModelConfig:
    base = dict(kind="lm", n_layers=2, d_model=32, d_head=8, d_state=8, vocab_size=16, chunk_size=4)
    return ModelConfig(**{**base, **kw})


def tiny_vision_config(**kw) -> ModelConfig:
    base = dict(kind="vision", n_layers=2, d_model=32, d_head=8, d_state=8, image_size=8, patch_size=2,
                channels=1, num_classes=5, chunk_size=4)
    return ModelConfig(**{**base, **kw})


def jitter(params, seed: int = 0, scale: float = 0.05):
    """Move parameters off their symmetric init so gradients are non-degenerate."""
    rng = np.random.default_rng(seed)
    for _, t in params.named_tensors():
        t.data += (rng.standard_normal(t.data.shape) * scale).astype(t.data.dtype)
    return params


@pytest.fixture
def tiny_lm():
    return jitter(init_params(tiny_lm_config(), 0))


@pytest.fixture
def tiny_vision():
    return jitter(init_params(tiny_vision_config(), 0))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
