import io
import tarfile

import httpx
import numpy as np
import pytest

from app.autodiff.rng import Rng
from app.errors import ConfigurationError, DatasetFormatError, DownloadError
from app.models.run import AugmentConfig
from app.services.dataset_service import (BatchLoader, augment, channel_statistics, download_cifar, hflip, load_cifar,
                                          parse_cifar_bytes, resized_crop, standardize, subsample)
from tests.conftest import cifar_bytes


def test_record_count_from_file_size():
    dataset = parse_cifar_bytes(cifar_bytes([7] + [0] * 9), "cifar10")
    assert len(dataset) == 10
    assert dataset.labels[0] == 7
    assert dataset.images.shape == (10, 3, 32, 32)


def test_plane_order_is_red_green_blue():
    blob = bytes([3]) + bytes([10] * 1024 + [20] * 1024 + [30] * 1024)
    image = parse_cifar_bytes(blob, "cifar10").images[0]
    assert (image[0] == 10).all() and (image[1] == 20).all() and (image[2] == 30).all()


def test_cifar100_reads_fine_and_coarse_labels():
    dataset = parse_cifar_bytes(cifar_bytes([42, 99], flavor="cifar100"), "cifar100")
    assert dataset.labels.tolist() == [42, 99]
    assert dataset.coarse_labels.tolist() == [2, 19]
    assert dataset.classes == 100


def test_truncated_file_names_the_record_count():
    with pytest.raises(DatasetFormatError, match="3073-byte"):
        parse_cifar_bytes(cifar_bytes([1, 2])[:-5], "cifar10", "batch.bin")


def test_load_cifar_concatenates_the_train_batches(cifar10_dir):
    train = load_cifar(cifar10_dir, "cifar10", "train")
    assert len(train) == 100
    assert train.class_counts().tolist() == [10] * 10
    assert len(load_cifar(cifar10_dir, "cifar10", "test")) == 30


def test_missing_files(tmp_path):
    with pytest.raises(DatasetFormatError):
        load_cifar(tmp_path, "cifar10", "train")


def test_subsample_is_stratified_and_deterministic(cifar10_dir):
    train = load_cifar(cifar10_dir, "cifar10", "train")
    half = subsample(train, 0.5, seed=4)
    assert half.class_counts().tolist() == [5] * 10
    np.testing.assert_array_equal(half.images, subsample(train, 0.5, seed=4).images)
    assert subsample(train, 1.0, seed=4) is train


def test_subsample_needs_one_image_per_class(cifar10_dir):
    train = load_cifar(cifar10_dir, "cifar10", "train")
    with pytest.raises(ConfigurationError):
        subsample(train, 0.01, seed=0)


def test_standardize_uses_channel_statistics():
    images = np.random.default_rng(0).integers(0, 256, size=(20, 3, 4, 4), dtype=np.uint8)
    mean, std = channel_statistics(images)
    out = standardize(images, mean, std, np.float64)
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 1.0)


def test_flip_twice_is_identity():
    image = np.random.default_rng(1).normal(size=(3, 8, 8))
    np.testing.assert_array_equal(hflip(hflip(image)), image)


def test_full_crop_at_origin_is_identity():
    image = np.random.default_rng(2).normal(size=(3, 8, 8))
    np.testing.assert_array_equal(resized_crop(image, 0, 0, 8), image)


def test_augment_preserves_shape():
    image = np.random.default_rng(3).normal(size=(3, 32, 32))
    rng = Rng(0, "augment")
    for _ in range(100):
        assert augment(image, rng, AugmentConfig()).shape == image.shape


def test_batch_order_is_independent_of_workers():
    images = np.random.default_rng(4).normal(size=(10, 3, 8, 8))
    labels = np.arange(10)
    single = BatchLoader(images, labels, 3, seed=1, augment_cfg=AugmentConfig(), workers=1, prefetch=1)
    pooled = BatchLoader(images, labels, 3, seed=1, augment_cfg=AugmentConfig(), workers=3, prefetch=4)
    a, b = list(single.epoch(2)), list(pooled.epoch(2))
    assert len(a) == len(single) == 4
    for (xa, ya), (xb, yb) in zip(a, b):
        np.testing.assert_array_equal(ya, yb)
        np.testing.assert_array_equal(xa, xb)
    assert sorted(np.concatenate([y for _, y in a]).tolist()) == list(range(10))


def test_epochs_get_different_orders():
    loader = BatchLoader(np.zeros((32, 1, 2, 2)), np.arange(32), 32, seed=0)
    (_, first), = loader.epoch(1)
    (_, second), = loader.epoch(2)
    assert not np.array_equal(first, second)


def test_abandoned_epoch_stops_the_producer():
    loader = BatchLoader(np.zeros((50, 1, 2, 2)), np.arange(50), 2, seed=0, prefetch=1)
    batches = loader.epoch(1)
    next(batches)
    batches.close()


def _archive(files) -> bytes:
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w:gz") as tar:
        for name, payload in files.items():
            info = tarfile.TarInfo(name)
            info.size = len(payload)
            tar.addfile(info, io.BytesIO(payload))
    return buf.getvalue()


@pytest.mark.asyncio
async def test_download_extracts_bin_files(settings, tmp_path):
    archive = _archive({"cifar-10-batches-bin/test_batch.bin": cifar_bytes([1, 2]),
                        "cifar-10-batches-bin/readme.html": b"<html/>"})
    transport = httpx.MockTransport(lambda request: httpx.Response(200, content=archive))
    written = await download_cifar("cifar10", settings, str(tmp_path / "data"), transport=transport)
    assert [p.name for p in written] == ["test_batch.bin"]
    assert len(load_cifar(tmp_path / "data", "cifar10", "test")) == 2


@pytest.mark.asyncio
async def test_download_http_error(settings, tmp_path):
    transport = httpx.MockTransport(lambda request: httpx.Response(404))
    with pytest.raises(DownloadError, match="404"):
        await download_cifar("cifar10", settings, str(tmp_path), transport=transport)
