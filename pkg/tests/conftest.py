import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from groundtrack.model import JointModel, ModelConfig

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_num_threads(1)


def random_boxes(rng, n, min_side=1e-3):
    """``n`` valid normalised boxes."""
    a = rng.uniform(0, 1, size=(n, 2))
    b = rng.uniform(0, 1, size=(n, 2))
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    hi = np.maximum(hi, np.minimum(lo + min_side, 1.0))
    lo = np.minimum(lo, hi - min_side)
    return np.concatenate([lo, hi], axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(n_layers_relation=1, n_layers_decoder=1, n_layers_temporal=1,
                       n_layers_lang=1, n_layers_vis=1, d_model=32, d_lang=32, d_vis=32)


@pytest.fixture
def small_model(small_config):
    torch.manual_seed(0)
    return JointModel(small_config).eval()


ACCEPTANCE_LINES = []


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
