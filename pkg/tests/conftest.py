import numpy as np
import pytest

from maskx.heads import BackboneConfig
from maskx.model import ModelConfig
from maskx.shapes import GenConfig, generate_dataset, split_classes
from maskx.train import TrainConfig
from maskx.transfer import TransferSpec

SMALL_GEN = GenConfig(height=64, width=64, min_size=0.25, max_size=0.5, max_instances=3)
SMALL_BACKBONE = BackboneConfig(((8, 3, 2), (16, 3, 2)))


def small_model(head_mode="transfer", stop_grad=True, mlp=False, **transfer) -> ModelConfig:
    return ModelConfig(num_classes=10, backbone=SMALL_BACKBONE, roi_dim=16, mask_dim=8, mask_size=8,
                       box_crop=4, mlp_hidden=16, mlp_fusion=mlp, head_mode=head_mode,
                       transfer=TransferSpec(stop_grad=stop_grad, **transfer))


def small_train(steps=6, **kwargs) -> TrainConfig:
    kwargs.setdefault("decay_steps", (steps // 2,) if steps > 2 else ())
    return TrainConfig(steps=steps, images_per_step=2, **kwargs)


@pytest.fixture(scope="session")
def small_scenes():
    return generate_dataset(3, 24, SMALL_GEN)


@pytest.fixture(scope="session")
def split():
    return split_classes(10, 5)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for the terminal summary, then assert it."""
    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  {number:>2}. {title}: {detail}"
        request.config.stash[ACCEPTANCE_LINES].append((number, line))
        assert passed, line
    return record
