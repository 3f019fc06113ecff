import numpy as np
import pytest
import torch

from latentfield.scene import SceneSpec, synth_scene


@pytest.fixture(scope="session")
def box4():
    return synth_scene(SceneSpec(n_views=4, height=16, width=16), seed=0)


@pytest.fixture(scope="session")
def box8():
    return synth_scene(SceneSpec(n_views=8, height=48, width=48), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
