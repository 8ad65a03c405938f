import numpy as np
import pytest
import torch

from ppc.config import ModelConfig, WorldConfig

torch.set_num_threads(1)


@pytest.fixture
def world() -> WorldConfig:
    return WorldConfig()


@pytest.fixture
def coarse_world() -> WorldConfig:
    """Patch-4 world used wherever a model has to be run quickly."""
    return WorldConfig(patch=4)


@pytest.fixture
def tiny_model_cfg() -> ModelConfig:
    return ModelConfig(dim=16, depth=1, heads=1, head_dim=16, mlp_ratio=2, lora_rank=2,
                       rope_split=(4, 6, 6))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log() -> list[str]:
    """Verdict lines of the acceptance criteria, echoed in the terminal summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
