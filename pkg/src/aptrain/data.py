"""Datasets: IDX files, Gaussian blobs and deterministic minibatching."""
from __future__ import annotations

import gzip
import importlib.util
import os
import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # float64 in [0, 1], shape (N, ...)
    labels: np.ndarray  # int64, shape (N,)
    class_count: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.class_count)


def _read(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(buf, magic, path):
    if len(buf) < 4 or struct.unpack(">I", buf[:4])[0] != magic:
        raise ValueError(f"{path}: not an IDX file (expected magic {magic:#010x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) - header < count:
        raise ValueError(f"{path}: truncated data ({len(buf) - header} of {count} bytes)")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, class_count=None) -> Dataset:
    """Read an unsigned-byte IDX image/label pair; pixels are scaled by 1/255."""
    images = _parse_idx(_read(images_path), IMAGE_MAGIC, images_path)
    labels = _parse_idx(_read(labels_path), LABEL_MAGIC, labels_path)
    if len(images) != len(labels):
        raise ValueError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images.astype(np.float64) / 255.0, labels, class_count)


def _write_idx(path, array, magic):
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(np.ascontiguousarray(array, dtype=np.uint8).tobytes())


def write_idx(ds: Dataset, images_path, labels_path):
    """Write ``ds`` as 3-d image / 1-d label IDX files (pixels rounded to bytes)."""
    images = ds.images
    if images.ndim == 2:
        images = images[:, None, :]
    if images.ndim != 3:
        raise ValueError("IDX images must be (N, rows, cols) or (N, features)")
    pixels = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    _write_idx(images_path, pixels, IMAGE_MAGIC)
    _write_idx(labels_path, ds.labels.astype(np.uint8), LABEL_MAGIC)


def load_mnist_dir(path):
    """Load ``(train, test)`` from a directory with the standard MNIST file names."""
    def find(name):
        for cand in (name, name + ".gz"):
            full = os.path.join(path, cand)
            if os.path.exists(full):
                return full
        raise FileNotFoundError(f"{name} not found in {path}")

    train = load_idx(*map(find, MNIST_NAMES["train"]))
    test = load_idx(*map(find, MNIST_NAMES["test"]))
    k = max(train.class_count, test.class_count)
    return Dataset(train.images, train.labels, k), Dataset(test.images, test.labels, k)


def synthetic_blobs(n, classes, dim, seed=0, separation=6.0, sigma=1.0) -> Dataset:
    """Isotropic Gaussian clusters whose means are ``separation * sigma`` apart.

    Means sit on a random simplex-like set of orthogonal directions scaled so
    that every pair of class means is exactly ``separation * sigma`` apart.
    Features are then min-max scaled into [0, 1].
    """
    if min(n, classes, dim) < 1:
        raise ValueError("n, classes and dim must all be >= 1")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(max(dim, classes), max(dim, classes))))
    means = q[:classes, :dim] * (separation * sigma / np.sqrt(2.0))
    if classes > dim:
        # not enough orthogonal directions; fall back to random spread-out means
        means = rng.normal(size=(classes, dim)) * separation * sigma
    labels = rng.integers(0, classes, size=n)
    x = means[labels] + rng.normal(0.0, sigma, size=(n, dim))
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    return Dataset(x, labels.astype(np.int64), classes)


def stratified_split(ds: Dataset, test_fraction=0.2, seed=0):
    """Split into ``(train, test)`` keeping class proportions."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(ds.class_count):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        n_test = int(round(len(idx) * test_fraction))
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return ds.subset(train_idx), ds.subset(test_idx)


def batches(ds: Dataset, batch_size: int, seed=0, shuffle=True, epoch=0):
    """Yield ``(x, y)`` minibatches covering every sample once; last batch may be short.

    The order depends only on ``(seed, epoch)``, so each epoch reshuffles
    reproducibly.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]


# ---------------------------------------------------------------------------
# MNIST 5k subset
# ---------------------------------------------------------------------------

def mnist5k_csv_path():
    """Location of the 5000-sample MNIST CSV bundled with the ``mlxtend`` wheel."""
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        raise FileNotFoundError("mlxtend is not installed; `pip install mlxtend` provides MNIST-5k")
    path = os.path.join(spec.submodule_search_locations[0], "data", "data", "mnist_5k.csv.gz")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return path


def load_mnist5k(csv_path=None) -> Dataset:
    """5000 MNIST digits (500 per class) as ``(N, 28, 28)`` images in [0, 1]."""
    raw = np.loadtxt(csv_path or mnist5k_csv_path(), delimiter=",", dtype=np.float64)
    images = raw[:, :-1].reshape(-1, 28, 28) / 255.0
    return Dataset(images, raw[:, -1].astype(np.int64), 10)


def export_mnist5k(out_dir, test_fraction=0.2, seed=0, csv_path=None):
    """Write a stratified train/test split of MNIST-5k as standard-named IDX files."""
    os.makedirs(out_dir, exist_ok=True)
    train, test = stratified_split(load_mnist5k(csv_path), test_fraction, seed)
    for part, ds in (("train", train), ("test", test)):
        img, lab = MNIST_NAMES[part]
        write_idx(ds, os.path.join(out_dir, img), os.path.join(out_dir, lab))
    return train, test
