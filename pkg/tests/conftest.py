import os

import numpy as np
import pytest

from mixvi.data import save_idx

IDX_SUFFIXES = {
    "train-images": "-idx3-ubyte",
    "train-labels": "-idx1-ubyte",
    "t10k-images": "-idx3-ubyte",
    "t10k-labels": "-idx1-ubyte",
}


def write_idx_archive(dirpath, train_images, train_labels, test_images, test_labels):
    os.makedirs(dirpath, exist_ok=True)
    payloads = {
        "train-images": train_images,
        "train-labels": train_labels,
        "t10k-images": test_images,
        "t10k-labels": test_labels,
    }
    for stem, arr in payloads.items():
        save_idx(os.path.join(dirpath, stem + IDX_SUFFIXES[stem]), arr)


@pytest.fixture(scope="session")
def tiny_archive(tmp_path_factory):
    """64 random 6x6 'images' with labels: enough to drive the data/CLI paths."""
    rng = np.random.default_rng(1234)
    root = tmp_path_factory.mktemp("tinyidx")
    write_idx_archive(root,
                      rng.random((64, 36)),
                      rng.integers(0, 4, 64),
                      rng.random((16, 36)),
                      rng.integers(0, 4, 16))
    return str(root)


@pytest.fixture(scope="session")
def digits_archive(tmp_path_factory):
    """Real handwritten-digit images written through the IDX path.

    Used when no full-size archive is supplied via MIXVI_DATA: 1500
    training + 297 test images of 8x8 digits, shuffled with a fixed seed.
    """
    from sklearn.datasets import load_digits

    X, y = load_digits(return_X_y=True)
    order = np.random.default_rng(0).permutation(len(X))
    X, y = X[order] / 16.0, y[order]
    root = tmp_path_factory.mktemp("digitsidx")
    write_idx_archive(root, X[:1500], y[:1500], X[1500:], y[1500:])
    return str(root)


def finite_diff(f, x, h=1e-5):
    """Central finite differences of a scalar function over an array."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = out.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        xp = xf.copy()
        xm = xf.copy()
        xp[i] += h
        xm[i] -= h
        flat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return out


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.abs(b), floor)
