import numpy as np
import pytest
import torch

from oneshotseg.data import GenConfig, generate_dataset, make_splits
from oneshotseg.encoder import EncoderConfig
from oneshotseg.model import ModelConfig, build_model


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(GenConfig(num_classes=16, images_per_class=8, image_size=32, seed=3))


@pytest.fixture(scope="session")
def split0():
    return make_splits(16, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


MICRO_ENCODER = EncoderConfig(channel_widths=(4, 8, 16, 16))


@pytest.fixture
def micro_model(split0):
    """Widths / 4, float64: the configuration used for finite-difference checks."""
    cfg = ModelConfig(encoder=MICRO_ENCODER, train_classes=split0.train_classes)
    return build_model(cfg, seed=0, dtype=torch.float64)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(LINES):
            terminalreporter.write_line(LINES[number])
