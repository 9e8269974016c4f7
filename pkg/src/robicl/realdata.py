"""Locate and load the MNIST / Fashion-MNIST / CIFAR-10 files and build
preprocessed binary class pairs.

Expected layout under a data root (gzipped variants are accepted):

    mnist/train-images-idx3-ubyte        fashion-mnist/<same names>
    mnist/train-labels-idx1-ubyte        cifar-10-batches-bin/data_batch_{1..5}.bin
    mnist/t10k-images-idx3-ubyte         cifar-10-batches-bin/test_batch.bin
    mnist/t10k-labels-idx1-ubyte

Preprocessing statistics (pooled mean and alignment signs) are fitted on the
training split of each pair and reused unchanged on its test split.
"""

import gzip
import shutil
import tempfile
from pathlib import Path

from .distributions import (apply_preprocess, class_pairs, fit_preprocess,
                            load_cifar, load_idx, split_by_class)
from .evalharness import RealPair

IDX_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
DATASET_DIRS = {"mnist": "mnist", "fmnist": "fashion-mnist",
                "cifar10": "cifar-10-batches-bin"}


def _resolve(path: Path):
    """Return a readable plain-file path, transparently gunzipping .gz."""
    if path.exists():
        return path
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        plain = Path(tempfile.gettempdir()) / f"robicl-{path.name}"
        if not plain.exists() or plain.stat().st_mtime < gz.stat().st_mtime:
            with gzip.open(gz, "rb") as src, open(plain, "wb") as dst:
                shutil.copyfileobj(src, dst)
        return plain
    return None


def dataset_available(data_dir, name: str) -> bool:
    return _find_files(Path(data_dir), name) is not None


def _find_files(root: Path, name: str):
    base = root / DATASET_DIRS[name]
    if name in ("mnist", "fmnist"):
        files = {k: _resolve(base / v) for k, v in IDX_NAMES.items()}
        if any(v is None for v in files.values()):
            return None
        return files
    batches = [_resolve(base / f"data_batch_{i}.bin") for i in range(1, 6)]
    test = _resolve(base / "test_batch.bin")
    if test is None or any(b is None for b in batches):
        return None
    return {"train_batches": batches, "test_batches": [test]}


def load_raw(data_dir, name: str):
    """((train features, train labels), (test features, test labels)) for a
    named dataset, or None when files are missing."""
    files = _find_files(Path(data_dir), name)
    if files is None:
        return None
    if name in ("mnist", "fmnist"):
        train = load_idx(files["train_images"], files["train_labels"])
        test = load_idx(files["test_images"], files["test_labels"])
    else:
        train = load_cifar(files["train_batches"])
        test = load_cifar(files["test_batches"])
    return train, test


def build_pairs(data_dir, name: str, pairs=None):
    """Preprocessed RealPair objects for the requested class pairs
    (default: all 45). Returns None when the dataset files are missing."""
    raw = load_raw(data_dir, name)
    if raw is None:
        return None
    (train_x, train_y), (test_x, test_y) = raw
    by_class_train = split_by_class(train_x, train_y)
    by_class_test = split_by_class(test_x, test_y)
    out = []
    for a, b in (pairs or class_pairs()):
        info = fit_preprocess(by_class_train[a], by_class_train[b])
        tag = f"{name}:{a}v{b}"
        train_ds = apply_preprocess(info, by_class_train[a], by_class_train[b], tag)
        test_ds = apply_preprocess(info, by_class_test[a], by_class_test[b], tag)
        out.append(RealPair(train_ds, test_ds, tag))
    return out
