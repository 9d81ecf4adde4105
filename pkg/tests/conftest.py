import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = Path(__file__).resolve().parents[1]
DATA = ROOT / "data"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def desk_paths():
    paths = {
        "mnist_images": DATA / "mnist-desk-images-idx3-ubyte.gz",
        "mnist_labels": DATA / "mnist-desk-labels-idx1-ubyte.gz",
        "fmnist_images": DATA / "fmnist-desk-images-idx3-ubyte.gz",
        "fmnist_labels": DATA / "fmnist-desk-labels-idx1-ubyte.gz",
    }
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        pytest.fail(f"desk data missing (run scripts/build_desk_data.py): {missing}")
    return paths


ACCEPTANCE_LINES = {}


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
