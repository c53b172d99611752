import io
import logging
import queue
import tarfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import httpx
import numpy as np
from scipy import ndimage

from app.autodiff.rng import Rng
from app.config.settings import Settings
from app.errors import ConfigurationError, DatasetFormatError, DownloadError
from app.models.run import AugmentConfig

logger = logging.getLogger(__name__)

IMAGE_SHAPE = (3, 32, 32)
PIXELS = 3 * 32 * 32
LAYOUTS = {
    # label bytes per record, classes, train files, test files, archive folder
    "cifar10": (1, 10, [f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"], "cifar-10-batches-bin"),
    "cifar100": (2, 100, ["train.bin"], ["test.bin"], "cifar-100-binary"),
}


@dataclass
class CifarDataset:
    """Raw uint8 images (N×3×32×32) with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    classes: int
    coarse_labels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices: np.ndarray) -> "CifarDataset":
        coarse = None if self.coarse_labels is None else self.coarse_labels[indices]
        return CifarDataset(self.images[indices], self.labels[indices], self.classes, coarse)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.classes)


def _layout(flavor: str):
    if flavor not in LAYOUTS:
        raise ConfigurationError(f"unknown dataset '{flavor}', expected one of {sorted(LAYOUTS)}")
    return LAYOUTS[flavor]


def parse_cifar_bytes(blob: bytes, flavor: str, source: str = "<bytes>") -> CifarDataset:
    """Decode a binary CIFAR batch: per record the label byte(s), then R, G and B planes."""
    label_bytes, classes, *_ = _layout(flavor)
    record = label_bytes + PIXELS
    if len(blob) % record:
        raise DatasetFormatError(
            f"{source}: {len(blob)} bytes is not a whole number of {record}-byte {flavor} records "
            f"(expected {len(blob) // record} or {len(blob) // record + 1} records)"
        )
    rows = np.frombuffer(blob, dtype=np.uint8).reshape(-1, record)
    images = rows[:, label_bytes:].reshape((-1,) + IMAGE_SHAPE).copy()
    labels = rows[:, label_bytes - 1].astype(np.int64)
    coarse = rows[:, 0].astype(np.int64) if label_bytes == 2 else None
    if labels.size and labels.max() >= classes:
        raise DatasetFormatError(f"{source}: label {labels.max()} outside the {classes} {flavor} classes")
    return CifarDataset(images, labels, classes, coarse)


def _find(data_dir: Path, name: str, folder: str) -> Path:
    for candidate in (data_dir / name, data_dir / folder / name):
        if candidate.is_file():
            return candidate
    raise DatasetFormatError(f"missing {name} under {data_dir} (run the download command first)")


def load_cifar(data_dir, flavor: str = "cifar10", split: str = "train") -> CifarDataset:
    label_bytes, classes, train_files, test_files, folder = _layout(flavor)
    if split not in ("train", "test"):
        raise ConfigurationError(f"unknown split '{split}'")
    files = train_files if split == "train" else test_files
    parts = [parse_cifar_bytes(_find(Path(data_dir), f, folder).read_bytes(), flavor, f) for f in files]
    coarse = None if parts[0].coarse_labels is None else np.concatenate([p.coarse_labels for p in parts])
    dataset = CifarDataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]),
                           classes, coarse)
    logger.info(f"Loaded {flavor} {split}: {len(dataset)} images from {len(files)} file(s)")
    return dataset


def subsample(dataset: CifarDataset, fraction: float, seed: int) -> CifarDataset:
    """Class-stratified random subset holding round(fraction·count) images of every class."""
    if not 0 < fraction <= 1:
        raise ConfigurationError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return dataset
    rng = Rng(seed).split("subsample")
    chosen: List[np.ndarray] = []
    for cls in range(dataset.classes):
        members = np.flatnonzero(dataset.labels == cls)
        if members.size == 0:
            continue
        keep = int(round(fraction * members.size))
        if keep < 1:
            raise ConfigurationError(f"fraction {fraction} leaves no sample of class {cls} ({members.size} available)")
        chosen.append(rng.split(f"class{cls}").permutation(members)[:keep])
    indices = np.sort(np.concatenate(chosen))
    logger.info(f"Stratified subsample: {indices.size} of {len(dataset)} images (fraction {fraction})")
    return dataset.take(indices)


def channel_statistics(images: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    scaled = images.astype(np.float64) / 255.0
    return scaled.mean(axis=(0, 2, 3)), scaled.std(axis=(0, 2, 3))


def standardize(images: np.ndarray, mean: np.ndarray, std: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 → [0, 1] → per-channel standardized floats."""
    scaled = images.astype(np.float64) / 255.0
    return ((scaled - mean[:, None, None]) / std[:, None, None]).astype(dtype)


def resized_crop(image: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    """Crop a size×size window and resize it back to the input side (bilinear)."""
    c, h, w = image.shape
    crop = image[:, top:top + size, left:left + size]
    if size == h and size == w:
        return crop.copy()
    return ndimage.zoom(crop, (1, h / size, w / size), order=1, mode="nearest", grid_mode=True)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1].copy()


def augment(image: np.ndarray, rng: Rng, cfg: AugmentConfig) -> np.ndarray:
    """Random resized crop (area share in [scale_min, scale_max]) then a horizontal flip."""
    out = image
    if cfg.crop:
        _, h, _ = image.shape
        scale = rng.uniform(cfg.scale_min, cfg.scale_max)
        size = int(np.clip(round(np.sqrt(scale) * h), 1, h))
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, h - size + 1))
        out = resized_crop(out, top, left, size)
    if cfg.flip and rng.random() < cfg.flip_prob:
        out = hflip(out)
    return out


class BatchLoader:
    """Deterministic epoch batches, prepared ahead of use by a background thread.

    Order and augmentation draws derive from (seed, epoch, batch index), so
    the batches do not depend on thread timing or worker count.
    """

    def __init__(self, images: np.ndarray, labels: np.ndarray, batch_size: int, seed: int,
                 augment_cfg: Optional[AugmentConfig] = None, shuffle: bool = True, prefetch: int = 2,
                 workers: int = 1):
        if len(images) != len(labels):
            raise ConfigurationError(f"{len(images)} images but {len(labels)} labels")
        self.images = images
        self.labels = labels
        self.batch_size = batch_size
        self.seed = seed
        self.augment_cfg = augment_cfg
        self.shuffle = shuffle
        self.prefetch = max(1, prefetch)
        self.workers = max(1, workers)

    def __len__(self) -> int:
        return (len(self.labels) + self.batch_size - 1) // self.batch_size

    def _order(self, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self.labels))
        return Rng(self.seed).split(f"epoch{epoch}").permutation(len(self.labels))

    def _build(self, epoch: int, index: int, members: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        batch = self.images[members]
        if self.augment_cfg is not None:
            rng = Rng(self.seed).split(f"epoch{epoch}/batch{index}")
            batch = np.stack([augment(img, rng, self.augment_cfg) for img in batch]).astype(batch.dtype)
        return batch, self.labels[members]

    def epoch(self, epoch: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        order = self._order(epoch)
        chunks = [order[i:i + self.batch_size] for i in range(0, len(order), self.batch_size)]
        pending: "queue.Queue" = queue.Queue(maxsize=self.prefetch)
        stop = threading.Event()
        done = object()

        def produce(pool: ThreadPoolExecutor):
            try:
                for i, members in enumerate(chunks):
                    future = pool.submit(self._build, epoch, i, members)
                    while not stop.is_set():
                        try:
                            pending.put(future, timeout=0.1)
                            break
                        except queue.Full:
                            continue
                    if stop.is_set():
                        return
            finally:
                pending.put(done)

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            producer = threading.Thread(target=produce, args=(pool,), daemon=True)
            producer.start()
            try:
                while True:
                    item = pending.get()
                    if item is done:
                        break
                    yield item.result()
            finally:
                stop.set()
                while producer.is_alive():
                    try:
                        pending.get(timeout=0.1)
                    except queue.Empty:
                        pass
                producer.join()


def _extract_bins(archive: bytes, target: Path) -> List[Path]:
    written = []
    with tarfile.open(fileobj=io.BytesIO(archive), mode="r:gz") as tar:
        for member in tar.getmembers():
            if member.isfile() and member.name.endswith(".bin"):
                out = target / Path(member.name).name
                out.write_bytes(tar.extractfile(member).read())
                written.append(out)
    return written


async def download_cifar(flavor: str, settings: Settings, data_dir: Optional[str] = None,
                         transport: Optional[httpx.AsyncBaseTransport] = None) -> List[Path]:
    """Fetch the binary CIFAR archive and unpack its ``*.bin`` files into the data directory."""
    _layout(flavor)
    url = settings.cifar10_url if flavor == "cifar10" else settings.cifar100_url
    target = Path(data_dir or settings.data_dir) / LAYOUTS[flavor][4]
    target.mkdir(parents=True, exist_ok=True)
    buffer = io.BytesIO()
    async with httpx.AsyncClient(timeout=settings.download_timeout, transport=transport,
                                 follow_redirects=True) as client:
        try:
            logger.info(f"Downloading {flavor} from {url}")
            async with client.stream("GET", url) as response:
                response.raise_for_status()
                async for chunk in response.aiter_bytes():
                    buffer.write(chunk)
        except httpx.HTTPStatusError as e:
            logger.error(f"Dataset download HTTP error: {e.response.status_code}")
            raise DownloadError(f"download of {url} failed: HTTP {e.response.status_code}")
        except httpx.RequestError as e:
            logger.error(f"Dataset download request error: {str(e)}")
            raise DownloadError(f"download of {url} failed: {str(e)}")
    try:
        written = _extract_bins(buffer.getvalue(), target)
    except tarfile.TarError as e:
        raise DownloadError(f"archive from {url} is not a gzip tarball: {e}")
    if not written:
        raise DownloadError(f"archive from {url} holds no .bin files")
    logger.info(f"Extracted {len(written)} files into {target}")
    return written
