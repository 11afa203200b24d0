import sys

import numpy as np
import pytest
from PIL import Image

from amddx.datamodel import DatasetManifest, Sample


def write_png(path, array):
    """Save an (H, W, 3) float array in [0, 1] or a uint8 array as PNG."""
    path.parent.mkdir(parents=True, exist_ok=True)
    if array.dtype != np.uint8:
        array = np.round(np.clip(array, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(array).save(path)
    return path


def make_samples(n, groups=None, lesions=(0, 0, 0, 0, 0)):
    groups = groups or [f"g{i}" for i in range(n)]
    return tuple(
        Sample(f"s{i}", f"s{i}.png", i % 2, None if lesions is None else tuple(lesions), groups[i])
        for i in range(n)
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_manifest():
    return DatasetManifest("tiny", make_samples(3))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
