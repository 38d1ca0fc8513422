import numpy as np
import pytest
import torch

from keystyle.backends import make_toy_extractor
from keystyle.core import ImagePlane, make_dataset
from keystyle.distillation import build_schedule

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sched():
    return build_schedule()


@pytest.fixture(scope="session")
def extractor():
    return make_toy_extractor(0)


def random_plane(rng, h=16, w=16, c=3):
    return ImagePlane(rng.uniform(0.0, 1.0, (h, w, c)).astype(np.float32))


@pytest.fixture
def tiny_dataset(rng):
    """4 frames of 16x16 with keyframes at 0 and 2."""
    frames = [random_plane(rng) for _ in range(4)]
    styles = {k: random_plane(rng) for k in (0, 2)}
    return make_dataset(frames, styles)


# acceptance criteria register one line each; printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
