import numpy as np
import pytest
import torch

from epiforge.dataset import generate_synthetic

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """4 classes x 3 cases x 6 images."""
    root = tmp_path_factory.mktemp("small")
    return generate_synthetic(root, 4, 3, 6, seed=1)


@pytest.fixture(scope="session")
def tiny_config():
    from epiforge.encoder import EncoderConfig

    return EncoderConfig(patch_size=16, embed_dim=16, depth=1, heads=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line; returns ``ok`` so tests can assert on it."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
