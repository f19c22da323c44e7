"""Dataset ingestion: CIFAR-10 binary batches, raw tensor files, sampling.

``make_synthetic_cifar`` writes a procedurally generated, CIFAR-shaped
10-class dataset in the CIFAR-10 binary record format so the desk-scale
experiments run without network access.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
RECORD_BYTES = 1 + 3 * 32 * 32
RAW_MAGIC = b"RTEN"


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray   # N x C x H x W float32, normalized
    labels: np.ndarray   # N int64
    source: str = "memory"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.source)

    def check_labels(self, num_classes: int) -> None:
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= num_classes):
            raise DatasetError(f"labels outside [0, {num_classes})")


def _normalize(pixels: np.ndarray, mean, std) -> np.ndarray:
    x = pixels.astype(np.float32) / 255.0
    m = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
    return (x - m) / s


def read_cifar10_records(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw (labels, uint8 N x 3 x 32 x 32 pixels) from one binary batch file."""
    buf = Path(path).read_bytes()
    if len(buf) % RECORD_BYTES:
        n_full = len(buf) // RECORD_BYTES
        raise DatasetError(f"{path}: truncated record at index {n_full}")
    rec = np.frombuffer(buf, np.uint8).reshape(-1, RECORD_BYTES)
    return rec[:, 0].astype(np.int64), rec[:, 1:].reshape(-1, 3, 32, 32)


def ingest_cifar10(batch_files, normalization=(CIFAR_MEAN, CIFAR_STD)) -> Dataset:
    """Load CIFAR-10 binary batches (1 label byte + 3072 planar RGB bytes per record)."""
    if isinstance(batch_files, (str, Path)):
        batch_files = [batch_files]
    labels, pixels = [], []
    for f in batch_files:
        lab, pix = read_cifar10_records(f)
        labels.append(lab)
        pixels.append(pix)
    if not labels:
        raise DatasetError("no CIFAR-10 batch files given")
    lab = np.concatenate(labels)
    if lab.max(initial=0) > 9:
        raise DatasetError("CIFAR-10 label byte > 9")
    mean, std = normalization
    ds = Dataset(_normalize(np.concatenate(pixels), mean, std), lab,
                 "cifar10:" + ",".join(Path(f).name for f in batch_files))
    return ds


def write_cifar10(path, labels: np.ndarray, pixels: np.ndarray) -> None:
    """Write uint8 N x 3 x 32 x 32 pixels in CIFAR-10 binary record format."""
    pixels = np.asarray(pixels, np.uint8).reshape(len(labels), -1)
    if pixels.shape[1] != RECORD_BYTES - 1:
        raise DatasetError("CIFAR-10 records hold 3x32x32 pixels")
    rec = np.concatenate([np.asarray(labels, np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(rec.tobytes())


def write_raw(path, array: np.ndarray) -> None:
    """``RTEN`` + u32 rank + u32 extents + little-endian f32 payload."""
    a = np.ascontiguousarray(array, dtype="<f4")
    Path(path).write_bytes(RAW_MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape) + a.tobytes())


def read_raw(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != RAW_MAGIC:
        raise DatasetError(f"{path}: bad magic {buf[:4]!r}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    off = 8 + 4 * rank
    n = int(np.prod(shape))
    if len(buf) - off != 4 * n:
        raise DatasetError(f"{path}: payload has {len(buf) - off} bytes, expected {4 * n}")
    return np.frombuffer(buf, "<f4", count=n, offset=off).reshape(shape).astype(np.float32)


def write_labels(path, labels) -> None:
    Path(path).write_bytes(np.asarray(labels, "<u4").tobytes())


def ingest_raw(tensor_file, labels_file) -> Dataset:
    images = read_raw(tensor_file)
    labels = np.frombuffer(Path(labels_file).read_bytes(), "<u4").astype(np.int64)
    return Dataset(images, labels, f"raw:{Path(tensor_file).name}")


def sample_calibration(dataset: Dataset, n: int, seed: int = 42) -> Dataset:
    """Deterministic random subset of ``n`` samples (identity when n == len)."""
    if n >= len(dataset):
        return dataset
    idx = np.sort(np.random.default_rng(seed).choice(len(dataset), n, replace=False))
    return dataset.subset(idx)


# ---------------------------------------------------------------------------
# procedural CIFAR-shaped data
# ---------------------------------------------------------------------------

def _class_prototypes(num_classes: int, task_seed: int) -> np.ndarray:
    """One 3 x 32 x 32 template per class: oriented gratings plus colored blobs."""
    rng = np.random.default_rng(task_seed)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float32)
    protos = np.zeros((num_classes, 3, 32, 32), np.float32)
    for k in range(num_classes):
        theta = np.pi * k / num_classes + rng.uniform(-0.1, 0.1)
        freq = rng.uniform(0.25, 0.6)
        grating = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + rng.uniform(0, 2 * np.pi))
        color = rng.uniform(-1, 1, 3)
        img = color[:, None, None] * grating[None]
        for _ in range(3):
            cy, cx = rng.uniform(6, 26, 2)
            r = rng.uniform(3, 7)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
            img += rng.uniform(-1.5, 1.5, 3)[:, None, None] * blob[None]
        protos[k] = img
    return protos


def synthetic_images(n: int, seed: int, num_classes: int = 10, task_seed: int = 1234,
                     noise: float = 2.2, shift: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Sample labeled uint8 images around the class templates."""
    rng = np.random.default_rng(seed)
    protos = _class_prototypes(num_classes, task_seed)
    labels = rng.integers(0, num_classes, n)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float32)
    out = np.empty((n, 3, 32, 32), np.uint8)
    for i, k in enumerate(labels):
        img = protos[k] * rng.uniform(0.6, 1.4)
        dy, dx = rng.integers(-shift, shift + 1, 2)
        img = np.roll(img, (dy, dx), axis=(1, 2))
        cy, cx = rng.uniform(0, 32, 2)
        r = rng.uniform(3, 8)
        distractor = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img = img + rng.uniform(-2, 2, 3)[:, None, None] * distractor[None]
        img = img + rng.normal(0, noise, img.shape)
        out[i] = np.clip(127.5 + 50.0 * img, 0, 255).astype(np.uint8)
    return out, labels


def make_synthetic_cifar(directory, n_train: int = 10000, n_test: int = 2000, seed: int = 0,
                         **kwargs) -> tuple[Path, Path]:
    """Write ``data_batch_1.bin`` and ``test_batch.bin`` under ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    train, test = d / "data_batch_1.bin", d / "test_batch.bin"
    pix, lab = synthetic_images(n_train, seed, **kwargs)
    write_cifar10(train, lab, pix)
    pix, lab = synthetic_images(n_test, seed + 1, **kwargs)
    write_cifar10(test, lab, pix)
    return train, test


def load_cifar10_dir(directory, split: str = "train") -> Dataset:
    """``data_batch_*.bin`` (train) or ``test_batch.bin`` (test) under ``directory``."""
    d = Path(directory)
    if split == "train":
        files = sorted(d.glob("data_batch_*.bin"))
    elif split == "test":
        files = [d / "test_batch.bin"] if (d / "test_batch.bin").exists() else []
    else:
        raise ValueError(f"unknown split {split!r}")
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 {split} batches in {d}")
    return ingest_cifar10(files)
