"""Dataset ingestion and preparation.

IDX is the big-endian binary layout image/label archives ship in: a magic
number (0x803 for image tensors, 0x801 for label vectors), dimension
sizes, then raw bytes. Pixels load as byte/255 into [0, 1] exactly.
Binarization is dynamic: fresh Bernoulli draws per pixel per epoch.
"""

import gzip
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray                 # (n, d_x) float64 in [0, 1]
    labels: np.ndarray | None = None   # (n,) int64 class ids

    def __post_init__(self):
        if self.images.ndim != 2 or len(self.images) < 1:
            raise ContractError("images must be a non-empty (n, d_x) matrix")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ContractError("image values must lie in [0, 1]")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise FormatError(
                f"label count {len(self.labels)} != image count {len(self.images)}")

    @property
    def n(self):
        return len(self.images)

    @property
    def d_x(self):
        return self.images.shape[1]

    def subset(self, idx):
        return Dataset(self.images[idx],
                       None if self.labels is None else self.labels[idx])


def _open_maybe_gz(path, mode):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def load_idx(path):
    """Raw IDX payload: images come back as (n, rows*cols) float64 in
    [0, 1] (byte/255 exactly), labels as (n,) int64."""
    with _open_maybe_gz(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header")
    magic = int.from_bytes(blob[:4], "big")
    if magic == IMAGE_MAGIC:
        ndim = 3
    elif magic == LABEL_MAGIC:
        ndim = 1
    else:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise FormatError(f"{path}: truncated dimension header")
    dims = [int.from_bytes(blob[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    expected = int(np.prod(dims))
    payload = np.frombuffer(blob, dtype=np.uint8, offset=header)
    if payload.size != expected:
        raise FormatError(f"{path}: payload has {payload.size} bytes, header says {expected}")
    if magic == LABEL_MAGIC:
        return payload.astype(np.int64)
    return (payload.astype(np.float64) / 255.0).reshape(dims[0], dims[1] * dims[2])


def save_idx(path, array, rows=None, cols=None):
    """Write an IDX file. Float image matrices in [0, 1] are quantized to
    bytes (round(x*255)); integer vectors become label files."""
    array = np.asarray(array)
    with _open_maybe_gz(path, "wb") as fh:
        if array.ndim == 1:
            fh.write(LABEL_MAGIC.to_bytes(4, "big"))
            fh.write(len(array).to_bytes(4, "big"))
            fh.write(array.astype(np.uint8).tobytes())
            return
        if rows is None or cols is None:
            side = int(round(np.sqrt(array.shape[1])))
            if side * side != array.shape[1]:
                raise ContractError("non-square images need explicit rows/cols")
            rows = cols = side
        fh.write(IMAGE_MAGIC.to_bytes(4, "big"))
        for d in (array.shape[0], rows, cols):
            fh.write(int(d).to_bytes(4, "big"))
        fh.write(np.round(array * 255.0).astype(np.uint8).tobytes())


def load_image_dataset(images_path, labels_path=None):
    images = load_idx(images_path)
    labels = None
    if labels_path is not None:
        labels = load_idx(labels_path)
        if labels.ndim != 1:
            raise FormatError(f"{labels_path} is not a label file")
    return Dataset(images, labels)


def binarize_dynamic(batch, rng):
    """Per-pixel Bernoulli(value) draws; values must lie in [0, 1]."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.min() < 0 or batch.max() > 1:
        raise ContractError("binarization input must lie in [0, 1]")
    return (rng.random(batch.shape) < batch).astype(np.float64)


def make_synthetic_2d(target, n, rng):
    """Point cloud from a 2-D target: ancestral sampling when the target
    provides exact draws, rejection sampling otherwise."""
    if n < 1:
        raise ContractError("n must be >= 1")
    return target.sample(n, rng)


@dataclass
class SplitSpec:
    train: float = 0.8
    val: float = 0.07
    test: float = 0.13
    seed: int = 0

    def __post_init__(self):
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ContractError("split fractions must sum to 1")
        if min(self.train, self.val, self.test) < 0:
            raise ContractError("split fractions must be non-negative")


def split_dataset(ds: Dataset, spec: SplitSpec):
    """Seeded shuffle, then a disjoint train/val/test partition."""
    n = ds.n
    n_train = int(round(n * spec.train))
    n_val = int(round(n * spec.val))
    if n_train + n_val > n:
        raise ContractError("split rounding exceeded the dataset")
    order = np.random.default_rng(spec.seed).permutation(n)
    return (ds.subset(order[:n_train]),
            ds.subset(order[n_train: n_train + n_val]),
            ds.subset(order[n_train + n_val:]))


def iter_batches(n, batch_size, rng, shuffle=True):
    """Index batches for one epoch; the final partial batch is kept."""
    if batch_size < 1 or batch_size > n:
        raise ContractError(f"batch_size must be in [1, {n}]")
    order = rng.permutation(n) if shuffle else np.arange(n)
    for lo in range(0, n, batch_size):
        yield order[lo: lo + batch_size]


def desk_mnist_splits(data_dir, n_train=10000, n_val=1000, n_test=1000):
    """Deterministic desk-scale subsetting of an IDX image archive laid
    out the standard way (train-images-idx3-ubyte[.gz] etc.): the first
    n_train training images, the next n_val for validation, and the first
    n_test test images."""
    import os

    def find(stem):
        for suffix in ("-idx3-ubyte", "-idx1-ubyte", ".idx3-ubyte", ".idx1-ubyte"):
            for gz in ("", ".gz"):
                p = os.path.join(data_dir, stem + suffix + gz)
                if os.path.exists(p):
                    return p
        raise FormatError(f"no IDX file for {stem!r} under {data_dir}")

    train = load_image_dataset(find("train-images"), find("train-labels"))
    test = load_image_dataset(find("t10k-images"), find("t10k-labels"))
    if train.n < n_train + n_val or test.n < n_test:
        raise ContractError("archive smaller than the requested desk subsets")
    return (train.subset(np.arange(n_train)),
            train.subset(np.arange(n_train, n_train + n_val)),
            test.subset(np.arange(n_test)))
