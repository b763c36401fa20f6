import os
from pathlib import Path

import numpy as np
import pytest
import torch

from distillpool.data import LabeledDataset, NormStats

REPO = Path(__file__).resolve().parents[1]
CIFAR_ROOT = Path(os.environ.get("DISTILLPOOL_CIFAR", REPO / "data" / "cifar-10-batches-bin"))


def cifar_available() -> bool:
    return (CIFAR_ROOT / "test_batch.bin").is_file()


requires_cifar = pytest.mark.skipif(not cifar_available(), reason=f"CIFAR-10 not found at {CIFAR_ROOT}")


def make_dataset(per_class=6, seed=0, dtype=torch.float32, num_classes=10) -> LabeledDataset:
    g = torch.Generator().manual_seed(seed)
    labels = torch.arange(num_classes).repeat_interleave(per_class)
    images = torch.randn((labels.numel(), 3, 32, 32), generator=g, dtype=dtype)
    images += labels.to(dtype).view(-1, 1, 1, 1) * 0.1  # weak class signal
    return LabeledDataset(images, labels, "train", NormStats((0.0,) * 3, (1.0,) * 3))


def write_fake_cifar(root: Path, seed=0) -> Path:
    """A structurally valid CIFAR-10 binary tree with random pixels."""
    from distillpool.data import RECORD_BYTES

    rng = np.random.default_rng(seed)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    for name in names:
        rec = rng.integers(0, 256, size=(10000, RECORD_BYTES), dtype=np.uint8)
        rec[:, 0] = np.arange(10000) % 10
        rec.tofile(root / name)
    return root


@pytest.fixture(scope="session")
def fake_cifar(tmp_path_factory):
    return write_fake_cifar(tmp_path_factory.mktemp("cifar"))


@pytest.fixture
def toy_train():
    return make_dataset()


@pytest.fixture(scope="session")
def cifar():
    if not cifar_available():
        pytest.skip(f"CIFAR-10 not found at {CIFAR_ROOT}")
    from distillpool.data import load_cifar10

    return load_cifar10(CIFAR_ROOT)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    np.seterr(all="ignore")


# ---- acceptance summary: one pass/fail line per criterion

ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
