import os
from pathlib import Path

import numpy as np
import pytest


def data_dir(name: str):
    """Dataset directory from the environment, else the usual local copy."""
    env = {"mnist": "SNN_MNIST_DIR", "fashion": "SNN_FASHION_DIR", "caltech": "SNN_CALTECH_DIR"}[name]
    path = os.environ.get(env)
    if path:
        return Path(path)
    default = Path(os.environ.get("RELPSP_DATA_ROOT", "/root/data")) / name
    return default if default.exists() else None


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_dir():
    d = data_dir("mnist")
    if d is None:
        pytest.skip("MNIST not available (set SNN_MNIST_DIR)")
    return d


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL/SKIP line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(criterion, status, detail: str = ""):
        if isinstance(status, (bool, np.bool_)):
            status = "PASS" if status else "FAIL"
        line = f"criterion {criterion}: {status}  {detail}".rstrip()
        lines.append(line)
        print(line)
        return status

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
