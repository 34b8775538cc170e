import time

import numpy as np
import pytest

from hgfusion.data import PoseDataset
from hgfusion.model import ModelConfig, build_model
from hgfusion.synthetic import make_synthetic_dataset
from hgfusion.training import TrainConfig, train

# Desk-scale recipes, calibrated for the toy model (uniform init, zero heads).
OVERFIT_LR = 1e-3
OVERFIT_STEPS = 2000
SEPARATION_LR = 2.5e-3
SEPARATION_STEPS = 350


@pytest.fixture(scope="session")
def tiny_plain(tmp_path_factory):
    """Six 64 px plain synthetic samples; paired with 32 px tiny models."""
    root = tmp_path_factory.mktemp("tiny_plain")
    return make_synthetic_dataset("plain", 6, 0, root, image_side=64)


@pytest.fixture
def tiny_config():
    return ModelConfig(num_stacks=1, channels=8, hourglass_depth=2, input_side=32)


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Toy baseline on 4 plain samples for the full step budget (run once per session)."""
    root = tmp_path_factory.mktemp("overfit")
    path = make_synthetic_dataset("plain", 4, 0, root, image_side=128)
    ds = PoseDataset.from_file(path, output_side=128)
    model = build_model(ModelConfig.toy(), seed=0)
    cfg = TrainConfig(learning_rate=OVERFIT_LR, batch_size=4, max_epochs=OVERFIT_STEPS, augment=False, seed=0)
    start = time.perf_counter()
    state = train(model, ds, None, cfg)
    return state, time.perf_counter() - start


_acceptance_lines = []


def record_acceptance(line: str) -> None:
    _acceptance_lines.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
