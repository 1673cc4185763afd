import numpy as np
import pytest

from flowar.ar_transformer import ARConfig
from flowar.engine import FlowARModel, ModelConfig
from flowar.engine.config import CodecConfig
from flowar.flow_head import FlowConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def micro_config(**overrides) -> ModelConfig:
    """A very small float64 model for property tests (fast, exact enough for 1e-10 checks)."""
    flow_kw = overrides.pop("flow", {})
    ar_kw = overrides.pop("ar", {})
    base = dict(image_size=16, num_classes=3, schedule=(1, 2, 4), dtype="float64", normalize=False,
                codec=CodecConfig(patch_size=4),
                ar=ARConfig(depth=2, width=32, heads=4, **ar_kw),
                flow=FlowConfig(depth=2, width=32, heads=4, freq_dim=16, **flow_kw))
    base.update(overrides)
    return ModelConfig(**base)


def randomize(module_or_model, rng, scale=0.3):
    """Overwrite every parameter (including zero-initialized ones) with random values."""
    for _, p in module_or_model.named_parameters():
        p.data = (rng.standard_normal(p.shape) * scale).astype(p.dtype)


@pytest.fixture
def micro_model():
    return FlowARModel(micro_config())


# --- acceptance summary ---------------------------------------------------------
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
