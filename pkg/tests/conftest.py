from pathlib import Path
from typing import Callable

import numpy as np
import pytest

from app.autodiff.rng import Rng
from app.config.settings import Settings
from app.models.arch import ArchConfig
from app.models.run import RunConfig
from app.services.trainer_service import TrainingData


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: builds full-size presets or trains for minutes")


@pytest.fixture
def rng() -> Rng:
    return Rng(1234, "tests")


def cifar_bytes(labels, flavor: str = "cifar10", seed: int = 0) -> bytes:
    """Binary CIFAR records with the given (fine) labels and random pixels."""
    gen = np.random.default_rng(seed)
    records = []
    for label in labels:
        head = [label] if flavor == "cifar10" else [label % 20, label]
        pixels = gen.integers(0, 256, size=3 * 32 * 32, dtype=np.uint8)
        records.append(bytes(head) + pixels.tobytes())
    return b"".join(records)


@pytest.fixture
def cifar10_dir(tmp_path: Path) -> Path:
    """Five train batches of 20 balanced records each and a 30-record test batch."""
    for i in range(1, 6):
        (tmp_path / f"data_batch_{i}.bin").write_bytes(cifar_bytes([j % 10 for j in range(20)], seed=i))
    (tmp_path / "test_batch.bin").write_bytes(cifar_bytes([j % 10 for j in range(30)], seed=99))
    return tmp_path


@pytest.fixture
def settings(tmp_path: Path) -> Settings:
    return Settings(data_dir=str(tmp_path / "data"), output_dir=str(tmp_path / "runs"), prefetch_batches=2,
                    num_workers=1)


MICRO_ARCH = dict(layers=2, hidden=8, heads=4, patch=4, image_size=8, channels=3, classes=3, mlp_ratio=1.0,
                  agent_variant="base")


@pytest.fixture
def micro_arch() -> ArchConfig:
    return ArchConfig(**MICRO_ARCH)


@pytest.fixture
def make_config(tmp_path: Path) -> Callable[..., RunConfig]:
    def make(**overrides) -> RunConfig:
        base = dict(arch=ArchConfig(**MICRO_ARCH), epochs=2, batch_size=8, seed=3, dtype="float64",
                    output_dir=str(tmp_path / "runs"), log_every=2)
        base.update(overrides)
        return RunConfig(**base)
    return make


@pytest.fixture
def micro_data() -> TrainingData:
    """24 training and 12 validation 3×8×8 images over 3 classes, already standardized."""
    gen = np.random.default_rng(7)
    train_y = np.arange(24) % 3
    val_y = np.arange(12) % 3
    train_x = gen.normal(size=(24, 3, 8, 8)) + train_y[:, None, None, None]
    val_x = gen.normal(size=(12, 3, 8, 8)) + val_y[:, None, None, None]
    return TrainingData(train_x, train_y, val_x, val_y, classes=3)
