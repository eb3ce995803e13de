"""Dataset readers (IDX, CIFAR-10 binary), direct encoding and subsetting."""
from __future__ import annotations

import gzip
import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (BadLabel, BadMagic, ConfigError, CountMismatch, InsufficientSamples,
                     TruncatedFile)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

DATA_ENV = "SPIKEPLAST_DATA"


@dataclass
class RawDataset:
    images: np.ndarray  # uint8, (n, channels, h, w)
    labels: np.ndarray  # uint8, (n,)
    source: str = ""
    checksum: str = ""

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "RawDataset":
        index = np.asarray(index)
        return RawDataset(self.images[index], self.labels[index], self.source,
                          _digest(self.images[index], self.labels[index]))

    @property
    def sample_shape(self):
        return tuple(self.images.shape[1:])


def _digest(images, labels) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images).tobytes())
    h.update(np.ascontiguousarray(labels).tobytes())
    return h.hexdigest()[:16]


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(f) as g:
                return g.read()
        return f.read()


def parse_idx(buf: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(buf) < 8:
        raise TruncatedFile(f"{what}: file shorter than IDX header")
    magic = int.from_bytes(buf[:4], "big")
    if magic != expected_magic:
        raise BadMagic(f"{what}: wrong magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise TruncatedFile(f"{what}: truncated IDX header")
    dims = tuple(int.from_bytes(buf[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim))
    size = int(np.prod(dims))
    if len(buf) - header < size:
        raise TruncatedFile(f"{what}: expected {size} data bytes, found {len(buf) - header}")
    return np.frombuffer(buf, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> RawDataset:
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise BadLabel(labels.max())
    images = images[:, None, :, :].copy()
    labels = labels.copy()
    return RawDataset(images, labels, Path(images_path).name, _digest(images, labels))


def load_cifar10(batch_paths) -> RawDataset:
    images, labels = [], []
    for p in batch_paths:
        buf = _read_bytes(p)
        if len(buf) == 0 or len(buf) % CIFAR_RECORD:
            raise TruncatedFile(f"{p}: size {len(buf)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0])
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    if not images:
        raise ConfigError("no CIFAR-10 batch files given")
    img = np.concatenate(images)
    lab = np.concatenate(labels)
    if lab.max() > 9:
        raise BadLabel(lab.max())
    return RawDataset(img, lab, "cifar10", _digest(img, lab))


def direct_encode(images) -> np.ndarray:
    """Pixel intensities as input currents in [0, 1] (``pixel / 255``).

    The same current is injected at every timestep of a presentation.
    """
    if isinstance(images, RawDataset):
        images = images.images
    return np.asarray(images, dtype=np.float64) / 255.0


def small_sample_subset(raw: RawDataset, per_class: int, seed, classes=range(10)) -> RawDataset:
    """Draw exactly ``per_class`` samples of each class without replacement."""
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    chosen = []
    for c in classes:
        pool = np.flatnonzero(raw.labels == c)
        if pool.size < per_class:
            raise InsufficientSamples(f"class {c} has {pool.size} samples, need {per_class}")
        chosen.append(rng.choice(pool, size=per_class, replace=False))
    return raw.subset(np.sort(np.concatenate(chosen)))


# ---------------------------------------------------------------------------
# dataset discovery
# ---------------------------------------------------------------------------

_IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
_DIRS = {"mnist": ("mnist", "MNIST", "MNIST/raw"),
         "fashion": ("fashion", "fashion-mnist", "FashionMNIST", "FashionMNIST/raw")}


def data_root(root=None) -> Path | None:
    root = root or os.environ.get(DATA_ENV)
    return Path(root) if root else None


def _find(base: Path, name: str) -> Path | None:
    for cand in (base / name, base / (name + ".gz"), base / name.replace("-idx", ".idx")):
        if cand.exists():
            return cand
    return None


def load_dataset(dataset: str, split: str = "train", root=None) -> RawDataset:
    """Load ``mnist``/``fashion`` (IDX), ``cifar10`` (binary) or ``mnist5k``.

    ``root`` defaults to ``$SPIKEPLAST_DATA``.  ``mnist5k`` is the 5,000-digit
    MNIST sample bundled with the ``mlxtend`` package; its ``train`` split is
    the first 300 digits of each class and ``test`` the remaining 200.
    """
    if dataset == "mnist5k":
        return load_mnist5k(split)
    base = data_root(root)
    if base is None:
        raise ConfigError(f"no dataset root: pass a path or set ${DATA_ENV}")
    if not base.exists():
        raise ConfigError(f"dataset root {base} does not exist")
    if dataset in _DIRS:
        if split not in _IDX_NAMES:
            raise ConfigError(f"unknown split {split!r}")
        img_name, lab_name = _IDX_NAMES[split]
        for sub in ("",) + _DIRS[dataset]:
            d = base / sub if sub else base
            img, lab = _find(d, img_name), _find(d, lab_name)
            if img and lab:
                return load_idx(img, lab)
        raise ConfigError(f"{dataset} {split} IDX files not found under {base}")
    if dataset == "cifar10":
        for sub in ("", "cifar-10-batches-bin", "cifar10"):
            d = base / sub if sub else base
            if split == "train":
                paths = [d / f"data_batch_{i}.bin" for i in range(1, 6)]
            elif split == "test":
                paths = [d / "test_batch.bin"]
            else:
                raise ConfigError(f"unknown split {split!r}")
            if all(p.exists() for p in paths):
                return load_cifar10(paths)
        raise ConfigError(f"cifar10 {split} batches not found under {base}")
    raise ConfigError(f"unknown dataset {dataset!r}")


MNIST5K_TRAIN_PER_CLASS = 300


def mnist5k_path() -> Path:
    try:
        import mlxtend
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ConfigError("dataset 'mnist5k' needs the mlxtend package installed") from exc
    return Path(mlxtend.__file__).parent / "data" / "data" / "mnist_5k.csv.gz"


def load_mnist5k(split: str = "train") -> RawDataset:
    path = mnist5k_path()
    if not path.exists():
        raise ConfigError(f"{path} missing")
    table = np.loadtxt(path, delimiter=",", dtype=np.uint8)
    images = table[:, :-1].reshape(-1, 1, 28, 28)
    labels = table[:, -1]
    parts = []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        parts.append(idx[:MNIST5K_TRAIN_PER_CLASS] if split == "train"
                     else idx[MNIST5K_TRAIN_PER_CLASS:])
    if split not in ("train", "test"):
        raise ConfigError(f"unknown split {split!r}")
    index = np.sort(np.concatenate(parts))
    images, labels = images[index].copy(), labels[index].copy()
    return RawDataset(images, labels, f"mnist5k-{split}", _digest(images, labels))
