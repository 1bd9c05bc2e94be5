"""Datasets: MNIST-style IDX files, synthetic regression, deterministic batches."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DESK_TRAIN_SIZE = 6000
DESK_TEST_SIZE = 1000

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
BUNDLED_FILES = {
    "train": ("subset-train-images-idx3-ubyte.gz", "subset-train-labels-idx1-ubyte.gz"),
    "test": ("subset-test-images-idx3-ubyte.gz", "subset-test-labels-idx1-ubyte.gz"),
}


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    name: str = ""
    normalization: str = "none"
    labels: Optional[np.ndarray] = None
    planted_weights: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} inputs but {self.targets.shape[0]} targets"
            )

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def is_classification(self) -> bool:
        return self.labels is not None

    def take(self, n: int) -> "Dataset":
        """The first ``n`` rows (file order)."""
        return replace(
            self,
            inputs=self.inputs[:n],
            targets=self.targets[:n],
            labels=None if self.labels is None else self.labels[:n],
            name=f"{self.name}[:{n}]",
        )

    def astype(self, dtype) -> "Dataset":
        return replace(self, inputs=self.inputs.astype(dtype), targets=self.targets.astype(dtype))


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxFormatError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, dtype=np.float32, name: str = "") -> Dataset:
    """Load an IDX image/label pair; pixels scaled by 1/255, labels one-hot.

    Gzip-compressed files are detected by their ``1f 8b`` prefix.
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images.shape[0]} images in {images_path} but {labels.shape[0]} labels in {labels_path}"
        )
    if labels.size and labels.max() >= num_classes:
        raise IdxFormatError(f"{labels_path}: label {labels.max()} >= {num_classes} classes")
    inputs = images.reshape(images.shape[0], -1).astype(dtype) / dtype(255)
    targets = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    targets[np.arange(labels.shape[0]), labels] = 1
    return Dataset(inputs, targets, name=name or Path(images_path).name,
                   normalization="x/255", labels=labels.astype(np.int64))


def _find(directory: Path, stem: str) -> Optional[Path]:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    return None


def load_mnist(data_dir=None, full: bool = False, dtype=np.float32) -> tuple[Dataset, Dataset]:
    """Train/test MNIST (or Fashion-MNIST, same file names).

    With ``data_dir`` holding the standard IDX files, returns the full sets
    when ``full`` is set and otherwise the first 6000 train / 1000 test
    images. Without ``data_dir`` the bundled subset (4000 train / 1000 test
    real MNIST images) is returned.
    """
    if data_dir is None:
        return bundled_mnist_subset(dtype)
    directory = Path(data_dir)
    out = []
    for split in ("train", "test"):
        images, labels = (_find(directory, stem) for stem in MNIST_FILES[split])
        if images is None or labels is None:
            raise FileNotFoundError(f"no MNIST {split} IDX files in {directory}")
        out.append(load_idx(images, labels, dtype=dtype, name=f"mnist-{split}"))
    train, test = out
    if not full:
        train, test = train.take(DESK_TRAIN_SIZE), test.take(DESK_TEST_SIZE)
    return train, test


def bundled_mnist_subset(dtype=np.float32) -> tuple[Dataset, Dataset]:
    root = resources.files("isaac") / "data"
    out = []
    for split in ("train", "test"):
        images, labels = (root / f for f in BUNDLED_FILES[split])
        with resources.as_file(images) as ip, resources.as_file(labels) as lp:
            out.append(load_idx(ip, lp, dtype=dtype, name=f"mnist-subset-{split}"))
    return out[0], out[1]


def autoencoder_view(d: Dataset) -> Dataset:
    """Reconstruction task: targets are the inputs."""
    return replace(d, targets=d.inputs, labels=None, name=d.name if d.name.endswith("/ae") else f"{d.name}/ae")


def synth_linear(n_samples: int, d_in: int, d_out: int, noise: float = 0.0, seed=0, dtype=np.float64) -> Dataset:
    """Linear regression data ``y = x W* + noise * eps`` with ``W*`` recorded."""
    if min(n_samples, d_in, d_out) < 1:
        raise ValueError("sizes must be at least 1")
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((d_in, d_out))
    x = rng.standard_normal((n_samples, d_in))
    y = x @ w + noise * rng.standard_normal((n_samples, d_out))
    return Dataset(x.astype(dtype), y.astype(dtype), name=f"synth-linear-{seed}",
                   normalization="none", planted_weights=w.astype(dtype))


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int = 0
    epochs: int = 1
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")

    def steps_per_epoch(self, n: int) -> int:
        return n // self.batch_size

    def epoch_indices(self, n: int, epoch: int) -> Iterator[np.ndarray]:
        """Index arrays for one epoch; the final partial batch is dropped."""
        order = np.random.default_rng([self.seed, epoch]).permutation(n) if self.shuffle else np.arange(n)
        for s in range(self.steps_per_epoch(n)):
            yield order[s * self.batch_size:(s + 1) * self.batch_size]

    def batches(self, d: Dataset) -> Iterator[tuple[int, np.ndarray, np.ndarray]]:
        for epoch in range(self.epochs):
            for idx in self.epoch_indices(len(d), epoch):
                yield epoch, d.inputs[idx], d.targets[idx]
