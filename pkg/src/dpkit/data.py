"""Datasets: CIFAR-10 binary batches, synthetic blobs, the dpkit container, Poisson sampling."""

from __future__ import annotations

import io
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from dpkit.errors import ConfigError, CorruptDataError, DataError

log = logging.getLogger(__name__)

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
NUM_CLASSES = 10
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
CONTAINER_MAGIC = "DPKIT-DATASET"
CONTAINER_VERSION = 1
SPLITS = ("train", "test")
PROVENANCES = ("cifar10", "synthetic", "perturbed")


@dataclass(frozen=True)
class Dataset:
    """Normalized images [N, 3, 32, 32] with integer labels in 0..9.

    ``norm_mean``/``norm_std`` are the per-channel constants that were
    subtracted/divided (computed on the train split).
    """

    images: np.ndarray
    labels: np.ndarray
    split: str
    provenance: str
    norm_mean: tuple[float, ...] = (0.0, 0.0, 0.0)
    norm_std: tuple[float, ...] = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1:] != IMAGE_SHAPE:
            raise DataError(f"images must have shape [N, 3, 32, 32], got {self.images.shape}")
        if len(self.images) == 0:
            raise DataError("dataset is empty")
        if self.labels.shape != (len(self.images),):
            raise DataError("labels must match the number of images")
        if self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES:
            raise DataError("labels must lie in 0..9")
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        if self.provenance not in PROVENANCES:
            raise DataError(f"unknown provenance {self.provenance!r}")
        self.images.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int) -> "Dataset":
        """First ``n`` records, keeping the normalization constants."""
        if n < 1:
            raise ConfigError("subset size must be positive")
        n = min(n, len(self))
        return Dataset(self.images[:n].copy(), self.labels[:n].copy(), self.split,
                       self.provenance, self.norm_mean, self.norm_std, dict(self.meta))

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)


# ---------------------------------------------------------------- CIFAR-10

def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images [N, 3, 32, 32] and labels from one binary batch file."""
    raw = np.fromfile(path, dtype=np.uint8)
    return parse_cifar_records(raw.tobytes(), path)


def parse_cifar_records(raw: bytes, path=None) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) == 0 or len(raw) % RECORD_BYTES:
        raise CorruptDataError(
            f"size {len(raw)} is not a positive multiple of {RECORD_BYTES}",
            offset=len(raw) - len(raw) % RECORD_BYTES, path=path)
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise CorruptDataError(f"label {labels[bad[0]]} out of range", offset=int(bad[0]) * RECORD_BYTES,
                               path=path)
    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE)
    return images, labels


def channel_stats(images01: np.ndarray) -> tuple[tuple[float, ...], tuple[float, ...]]:
    mean = images01.mean(axis=(0, 2, 3))
    std = images01.std(axis=(0, 2, 3))
    # constant channels would divide by zero
    std = np.where(std > 0, std, 1.0)
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


def normalize(images01: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean).reshape(1, 3, 1, 1)
    s = np.asarray(std).reshape(1, 3, 1, 1)
    return (images01 - m) / s


def load_cifar10(directory=None, train_subset: int | None = None) -> tuple[Dataset, Dataset]:
    """Load the six binary batch files; normalization constants come from the train split.

    ``train_subset`` keeps the first N train records, and the normalization
    constants are then computed on that subset.  ``directory`` defaults to
    ``$DPKIT_DATA_DIR``.
    """
    if directory is None:
        directory = os.environ.get("DPKIT_DATA_DIR")
        if not directory:
            raise DataError("no CIFAR-10 directory given and DPKIT_DATA_DIR is unset")
    directory = Path(directory)
    if (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"
    missing = [f for f in TRAIN_FILES + (TEST_FILE,) if not (directory / f).is_file()]
    if missing:
        raise DataError(f"{directory}: missing CIFAR-10 batch files {missing}")
    parts = [read_cifar_batch(directory / f) for f in TRAIN_FILES]
    train_raw = np.concatenate([p[0] for p in parts])
    train_labels = np.concatenate([p[1] for p in parts])
    test_raw, test_labels = read_cifar_batch(directory / TEST_FILE)
    if train_subset is not None:
        train_raw, train_labels = train_raw[:train_subset], train_labels[:train_subset]
    return _normalized_pair(train_raw, train_labels, test_raw, test_labels, "cifar10",
                            {"source": str(directory)})


def _normalized_pair(train_raw, train_labels, test_raw, test_labels, provenance, meta):
    train01 = train_raw.astype(np.float64) / 255.0
    test01 = test_raw.astype(np.float64) / 255.0
    mean, std = channel_stats(train01)
    train = Dataset(normalize(train01, mean, std), train_labels, "train", provenance, mean, std,
                    dict(meta))
    test = Dataset(normalize(test01, mean, std), test_labels, "test", provenance, mean, std,
                   dict(meta))
    return train, test


def load_cifar_file(path, split="train", stats=None) -> Dataset:
    """A single batch file as a Dataset (stats computed from it unless given)."""
    raw, labels = read_cifar_batch(path)
    x01 = raw.astype(np.float64) / 255.0
    mean, std = stats if stats is not None else channel_stats(x01)
    return Dataset(normalize(x01, mean, std), labels, split, "cifar10", mean, std)


def write_cifar_batch(path, images_uint8: np.ndarray, labels) -> None:
    """Write records in the CIFAR-10 binary layout (used for fixtures)."""
    images_uint8 = np.asarray(images_uint8, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images_uint8], axis=1)
    Path(path).write_bytes(rec.tobytes())


# ---------------------------------------------------------------- synthetic

LATENT_DIM = 16


def make_synthetic(classes: int = 10, per_class: int = 100, separation: float = 4.0,
                   seed: int = 0, split: str = "train", pixel_noise: float = 0.1) -> Dataset:
    """Gaussian blobs in a 16-d latent space rendered as 3x32x32 images.

    Class centres sit at pairwise distance ``separation`` (scaled simplex
    vertices); each example is its centre plus unit Gaussian latent noise,
    mapped through fixed blocky spatial patterns, plus small pixel noise.
    The patterns depend only on ``seed``'s structure stream, so draws with
    different ``split`` share classes but not examples.
    """
    if not 2 <= classes <= NUM_CLASSES:
        raise ConfigError(f"classes must lie in 2..{NUM_CLASSES}")
    if per_class < 1:
        raise ConfigError("per_class must be positive")
    if not separation > 0:
        raise ConfigError("separation must be positive")
    if classes > LATENT_DIM:
        raise ConfigError("too many classes for the latent dimension")
    structure = np.random.default_rng([seed, 0])
    coarse = structure.normal(size=(LATENT_DIM, 3, 8, 8))
    patterns = np.kron(coarse, np.ones((1, 1, 4, 4))).reshape(LATENT_DIM, -1)
    q, _ = np.linalg.qr(patterns.T)
    basis = q.T * np.sqrt(q.shape[0]) / 8.0
    rotation, _ = np.linalg.qr(structure.normal(size=(LATENT_DIM, LATENT_DIM)))
    centres = rotation[:classes] * (separation / np.sqrt(2.0))

    draws = np.random.default_rng([seed, 1 if split == "train" else 2])
    labels = np.repeat(np.arange(classes), per_class)
    latent = centres[labels] + draws.normal(size=(len(labels), LATENT_DIM))
    images = latent @ basis + pixel_noise * draws.normal(size=(len(labels), basis.shape[1]))
    order = draws.permutation(len(labels))
    images = images[order].reshape(-1, *IMAGE_SHAPE)
    return Dataset(images, labels[order].astype(np.int64), split, "synthetic",
                   meta={"classes": classes, "per_class": per_class, "separation": separation,
                         "seed": seed})


def make_synthetic_pair(classes=10, per_class=100, separation=4.0, seed=0, test_per_class=None):
    train = make_synthetic(classes, per_class, separation, seed, "train")
    test = make_synthetic(classes, test_per_class or per_class, separation, seed, "test")
    return train, test


# ---------------------------------------------------------------- container

def save_dataset(ds: Dataset, path) -> None:
    """Text header then little-endian int64 labels and float64 images."""
    header = [
        f"{CONTAINER_MAGIC} {CONTAINER_VERSION}",
        f"n {len(ds)}",
        "dims " + " ".join(map(str, IMAGE_SHAPE)),
        f"split {ds.split}",
        f"provenance {ds.provenance}",
        "norm_mean " + " ".join(repr(v) for v in ds.norm_mean),
        "norm_std " + " ".join(repr(v) for v in ds.norm_std),
    ]
    for key in sorted(ds.meta):
        value = ds.meta[key]
        if isinstance(value, (bool, int, float, str)) and " " not in str(key) + str(value):
            header.append(f"meta {key} {value!r}" if isinstance(value, float) else
                          f"meta {key} {value}")
    header.append("end")
    payload = ds.labels.astype("<i8").tobytes() + ds.images.astype("<f8").tobytes()
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + payload)


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    fields, meta = {}, {}
    first = buf.readline().decode("ascii", "replace").split()
    if first != [CONTAINER_MAGIC, str(CONTAINER_VERSION)]:
        raise CorruptDataError("not a dpkit dataset container", offset=0, path=path)
    while True:
        line = buf.readline()
        if not line:
            raise CorruptDataError("header not terminated", offset=buf.tell(), path=path)
        parts = line.decode("ascii").split()
        if parts == ["end"]:
            break
        if parts and parts[0] == "meta" and len(parts) == 3:
            meta[parts[1]] = _meta_value(parts[2])
            continue
        if parts:
            fields[parts[0]] = parts[1:]
    missing = [k for k in ("n", "dims", "split", "provenance", "norm_mean", "norm_std")
               if not fields.get(k)]
    if missing:
        raise CorruptDataError(f"header lacks {missing}", offset=0, path=path)
    n = int(fields["n"][0])
    dims = tuple(int(v) for v in fields["dims"])
    if dims != IMAGE_SHAPE:
        raise CorruptDataError(f"unsupported dims {dims}", path=path)
    start = buf.tell()
    expected = n * 8 + n * int(np.prod(dims)) * 8
    if len(raw) - start != expected:
        raise CorruptDataError(f"payload has {len(raw) - start} bytes, expected {expected}",
                               offset=start, path=path)
    labels = np.frombuffer(raw, dtype="<i8", count=n, offset=start).astype(np.int64)
    images = np.frombuffer(raw, dtype="<f8", offset=start + n * 8).astype(np.float64)
    return Dataset(images.reshape(n, *dims), labels, fields["split"][0], fields["provenance"][0],
                   tuple(float(v) for v in fields["norm_mean"]),
                   tuple(float(v) for v in fields["norm_std"]), meta)


def _meta_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


# ---------------------------------------------------------------- sampling

@dataclass
class PoissonSampler:
    rate: float
    size: int
    rng: np.random.Generator

    def __post_init__(self):
        if not 0 < self.rate <= 1:
            raise ConfigError(f"sampling rate must lie in (0, 1], got {self.rate}")
        if self.size < 1:
            raise ConfigError("sampler needs a positive dataset size")

    def draw(self) -> np.ndarray:
        return np.flatnonzero(self.rng.random(self.size) < self.rate)


def poisson_batches(sampler: PoissonSampler, steps: int) -> Iterator[np.ndarray]:
    """``steps`` index sets, each example included independently with probability ``rate``."""
    for _ in range(steps):
        yield sampler.draw()
