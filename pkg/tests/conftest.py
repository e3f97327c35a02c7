import numpy as np
import pytest

from adaseg.data import Dataset, SyntheticSpec, generate_synthetic_dataset
from adaseg.unet import UNetConfig, build_unet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return UNetConfig(n=16, base_channels=2, depth=3, dropout=0.5)


@pytest.fixture
def tiny_model(tiny_config):
    return build_unet(tiny_config, np.random.default_rng(5))


@pytest.fixture(scope="session")
def small_data():
    """16x16 synthetic train/val sets, shared across tests (treat as read-only)."""
    return generate_synthetic_dataset(SyntheticSpec(n=16, train=12, val=4), seed=3)


def random_dataset(rng, count=4, n=16, split="train") -> Dataset:
    images = rng.uniform(0, 1, (count, n, n)).astype(np.float32)
    masks = np.zeros((count, n, n), np.uint8)
    for k in range(count):
        r, c = rng.integers(2, n - 6, size=2)
        masks[k, r:r + 4, c:c + 4] = 1
    return Dataset([f"{split}_{k:04d}" for k in range(count)], images, masks, split)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = list(getattr(mod, "ACCEPTANCE_RESULTS", []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for ln in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(ln)
