import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
os.environ.setdefault("SPATIALCTL_CACHE", str(ROOT / ".cache"))
os.environ.setdefault("SPATIALCTL_LLM", "mock")

from spatialctl.denoiser import Denoiser, generate_dataset  # noqa: E402
from spatialctl.scheduler import LatentImage, NoiseSchedule  # noqa: E402


@pytest.fixture(scope="session")
def schedule():
    return NoiseSchedule()


@pytest.fixture(scope="session")
def untrained():
    return Denoiser.untrained(seed=0)


@pytest.fixture(scope="session")
def active():
    """Untrained weights with a non-zero output head, so every layer reaches eps."""
    import torch

    den = Denoiser.untrained(seed=1)
    torch.manual_seed(1)
    torch.nn.init.normal_(den.model.out.weight, std=0.05)
    return den


@pytest.fixture(scope="session")
def trained():
    """The standard toy denoiser; trained once (about ten minutes) and cached."""
    from spatialctl.runner.models import load_denoiser

    return load_denoiser()


@pytest.fixture(scope="session")
def eval_pairs():
    return generate_dataset(25, 32, seed=777)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def latent(rng, shape=(32, 32, 3), t=0):
    return LatentImage(rng.uniform(-1, 1, size=shape), t)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, passed, detail)``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(n: int, passed: bool, detail: str) -> bool:
        line = f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines[n] = line
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
