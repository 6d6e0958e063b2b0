import os
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import settings
from PIL import Image

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

torch.set_num_threads(1)

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def natural_images():
    """A few real photographs shipped with scikit-image, as float RGB."""
    from skimage import data

    imgs = {
        "astronaut": data.astronaut()[80:208, 160:288],
        "coffee": data.coffee()[100:196, 200:328],
        "chelsea": data.chelsea()[60:180, 100:220],
    }
    return {k: v.astype(np.float64) / 255.0 for k, v in imgs.items()}


@pytest.fixture(scope="session")
def image_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("images")
    for name, img in natural_images().items():
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(d / f"{name}.png")
    return d


@pytest.fixture(scope="session")
def train_dir(tmp_path_factory):
    from skimage import data

    d = tmp_path_factory.mktemp("train")
    Image.fromarray(data.astronaut()[100:228, 150:278]).save(d / "a.png")
    Image.fromarray(data.coffee()[100:228, 200:328]).save(d / "b.png")
    return d


def set5_dir():
    env = os.environ.get("CDCN_SET5_DIR")
    if env:
        return Path(env)
    return Path(__file__).parent / "data" / "Set5"
