"""Synthetic samplers, real-dataset ingestion, preprocessing, and statistics.

Synthetic data lives in the label-product representation u = y*x wherever
convenient: the training family fixes u_c = 1 and draws the other
coordinates from U[0, lambda]; the normal test family draws u_i from
N(alpha, alpha^2) / N(beta, beta^2) / N(0, gamma^2) per feature block.
"""

import csv
import json
import struct
from dataclasses import dataclass

import numpy as np


class FormatError(ValueError):
    """Malformed binary dataset file."""


@dataclass(frozen=True)
class TrainDistSpec:
    """Training family: robust coordinate c (1-based), non-robust scale lambda."""

    d: int
    lam: float
    c: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not 0.0 < self.lam < 1.0:
            raise ValueError("lambda must lie in (0, 1)")
        if not 1 <= self.c <= self.d:
            raise ValueError(f"c must lie in [1, {self.d}]")


@dataclass(frozen=True)
class TestDistSpec:
    """Test family with robust / non-robust / irrelevant feature blocks.

    Index sets are 0-based and default to consecutive blocks
    [0, d_rob), [d_rob, d_rob+d_vul), [d_rob+d_vul, d).
    """

    d_rob: int
    d_vul: int
    d_irr: int
    alpha: float
    beta: float
    gamma: float
    s_rob: tuple = None
    s_vul: tuple = None
    s_irr: tuple = None

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0 or self.gamma < 0:
            raise ValueError("need alpha > 0, beta > 0, gamma >= 0")
        if min(self.d_rob, self.d_vul, self.d_irr) < 0:
            raise ValueError("block sizes must be nonnegative")
        d = self.d
        rob = self.s_rob if self.s_rob is not None else tuple(range(self.d_rob))
        vul = self.s_vul if self.s_vul is not None else tuple(
            range(self.d_rob, self.d_rob + self.d_vul))
        irr = self.s_irr if self.s_irr is not None else tuple(
            range(self.d_rob + self.d_vul, d))
        rob, vul, irr = tuple(rob), tuple(vul), tuple(irr)
        if (len(rob), len(vul), len(irr)) != (self.d_rob, self.d_vul, self.d_irr):
            raise ValueError("index set sizes do not match the declared counts")
        if sorted(rob + vul + irr) != list(range(d)):
            raise ValueError("index sets must partition [0, d)")
        object.__setattr__(self, "s_rob", rob)
        object.__setattr__(self, "s_vul", vul)
        object.__setattr__(self, "s_irr", irr)

    @property
    def d(self):
        return self.d_rob + self.d_vul + self.d_irr


@dataclass
class LabeledDataset:
    """Feature matrix (n, d) with +/-1 labels and a provenance tag."""

    features: np.ndarray
    labels: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("labels must be +/-1")

    def __len__(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def products(self):
        """u = y*x, shape (n, d)."""
        return self.labels[:, None] * self.features


def train_products(d, lam, count, rng, c=None):
    """u = y*x samples of the training family as an array.

    c may be a scalar 1-based robust index or an array of length `count`
    (one index per row). Returns (count, d).
    """
    u = rng.uniform(0.0, lam, size=(count, d))
    if c is None:
        c = rng.integers(1, d + 1, size=count)
    idx = np.asarray(c) - 1
    u[np.arange(count), idx] = 1.0
    return u


def sample_train(spec: TrainDistSpec, count: int, seed: int) -> LabeledDataset:
    """Labelled samples from the training family; deterministic under seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.choice((-1.0, 1.0), size=count)
    u = train_products(spec.d, spec.lam, count, rng, spec.c)
    return LabeledDataset(labels[:, None] * u, labels,
                          f"train_dist(d={spec.d},lambda={spec.lam},c={spec.c})")


def test_normal_products(spec: TestDistSpec, count, rng):
    """u = y*x samples of the normal-family test distribution, (count, d)."""
    u = np.empty((count, spec.d))
    rob, vul, irr = list(spec.s_rob), list(spec.s_vul), list(spec.s_irr)
    if rob:
        u[:, rob] = rng.normal(spec.alpha, spec.alpha, size=(count, len(rob)))
    if vul:
        u[:, vul] = rng.normal(spec.beta, spec.beta, size=(count, len(vul)))
    if irr:
        if spec.gamma == 0.0:
            u[:, irr] = 0.0
        else:
            u[:, irr] = rng.normal(0.0, spec.gamma, size=(count, len(irr)))
    return u


def sample_test_normal(spec: TestDistSpec, count: int, seed: int) -> LabeledDataset:
    """Labelled samples from the normal test family; deterministic under seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.choice((-1.0, 1.0), size=count)
    u = test_normal_products(spec, count, rng)
    return LabeledDataset(
        labels[:, None] * u, labels,
        f"test_normal(d_rob={spec.d_rob},d_vul={spec.d_vul},d_irr={spec.d_irr},"
        f"alpha={spec.alpha},beta={spec.beta},gamma={spec.gamma})")


@dataclass(frozen=True)
class PreprocessInfo:
    """Statistics fitted on the training split and reused on test data."""

    mean: np.ndarray
    signs: np.ndarray


def fit_preprocess(class0, class1) -> PreprocessInfo:
    """Center on the pooled mean, then align each dimension with the label:
    sign_i = sgn(sum_n y_n x'_{n,i}) on the centered data, sgn(0) := +1."""
    class0 = np.asarray(class0, dtype=np.float64)
    class1 = np.asarray(class1, dtype=np.float64)
    if class0.size == 0 or class1.size == 0:
        raise ValueError("both classes must be nonempty")
    if class0.shape[1] != class1.shape[1]:
        raise ValueError("class dimensions differ")
    pooled = np.concatenate([class0, class1], axis=0)
    mean = pooled.mean(axis=0)
    corr = (class0 - mean).sum(axis=0) - (class1 - mean).sum(axis=0)
    signs = np.where(corr >= 0.0, 1.0, -1.0)
    return PreprocessInfo(mean, signs)


def apply_preprocess(info: PreprocessInfo, class0, class1, tag="") -> LabeledDataset:
    class0 = np.asarray(class0, dtype=np.float64)
    class1 = np.asarray(class1, dtype=np.float64)
    feats = np.concatenate([class0, class1], axis=0)
    feats = (feats - info.mean) * info.signs
    labels = np.concatenate([np.ones(len(class0)), -np.ones(len(class1))])
    return LabeledDataset(feats, labels, tag)


def preprocess_binary(class0, class1, tag="") -> LabeledDataset:
    """Fit and apply in one step (class0 -> +1, class1 -> -1)."""
    info = fit_preprocess(class0, class1)
    return apply_preprocess(info, class0, class1, tag)


_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


def _read_exact(f, n, path):
    buf = f.read(n)
    if len(buf) != n:
        raise IOError(f"{path}: truncated file (wanted {n} bytes, got {len(buf)})")
    return buf


def load_idx(images_path, labels_path):
    """Parse an IDX image/label file pair into ((n, rows*cols) floats in
    [0, 1], (n,) integer labels). Big-endian headers, pixels scaled by 255."""
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path))
        if magic != _IDX_IMAGE_MAGIC:
            raise FormatError(
                f"{images_path}: image magic 0x{magic:08x}, expected 0x{_IDX_IMAGE_MAGIC:08x}")
        raw = _read_exact(f, count * rows * cols, images_path)
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, labels_path))
        if magic != _IDX_LABEL_MAGIC:
            raise FormatError(
                f"{labels_path}: label magic 0x{magic:08x}, expected 0x{_IDX_LABEL_MAGIC:08x}")
        if label_count != count:
            raise FormatError(
                f"label count {label_count} != image count {count}")
        labels = np.frombuffer(_read_exact(f, count, labels_path), dtype=np.uint8)
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


_CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes


def load_cifar(batch_paths):
    """Parse CIFAR-10 binary batches into ((n, 3072) floats in [0, 1],
    (n,) integer labels). R, G, B planes are flattened in file order."""
    feats, labels = [], []
    for path in batch_paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) % _CIFAR_RECORD != 0:
            raise FormatError(
                f"{path}: length {len(raw)} is not a multiple of {_CIFAR_RECORD}")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
        labels.append(arr[:, 0].astype(np.int64))
        feats.append(arr[:, 1:].astype(np.float64) / 255.0)
    return np.concatenate(feats, axis=0), np.concatenate(labels, axis=0)


def split_by_class(features, labels):
    """{class label: feature rows} for raw multiclass data."""
    return {int(c): features[labels == c] for c in np.unique(labels)}


def class_pairs(n_classes=10):
    """All lexicographic binary pairs (0,1), (0,2), ..., (8,9); the first
    class of each pair is assigned label +1."""
    return [(i, j) for i in range(n_classes) for j in range(i + 1, n_classes)]


@dataclass
class PcaAlignment:
    basis: np.ndarray          # (d, target_dim) sign-fixed eigenvectors
    eigenvalues: np.ndarray
    effective_rank: int


def pca_align(dataset: LabeledDataset, target_dim: int):
    """Rotate into the principal basis of the empirical covariance of y*x.

    Coefficients are c_{n,i} = e_i . x_n with eigenvectors sign-fixed so
    sum_n y_n c_{n,i} >= 0. Returns (LabeledDataset, PcaAlignment); a
    covariance rank below target_dim is reported, not raised.
    """
    if target_dim > dataset.d:
        raise ValueError("target_dim exceeds data dimension")
    if len(dataset) < target_dim:
        raise ValueError("need at least target_dim samples")
    u = dataset.products()
    centered = u - u.mean(axis=0)
    cov = centered.T @ centered / (len(dataset) - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:target_dim]
    eigvals = eigvals[order]
    basis = eigvecs[:, order]
    coeffs = dataset.features @ basis
    signs = np.where((dataset.labels[:, None] * coeffs).sum(axis=0) >= 0.0, 1.0, -1.0)
    basis = basis * signs
    coeffs = coeffs * signs
    tol = max(eigvals.max(), 0.0) * len(dataset) * np.finfo(float).eps
    rank = int((eigvals > tol).sum())
    aligned = LabeledDataset(coeffs, dataset.labels.copy(),
                             dataset.provenance + "|pca")
    return aligned, PcaAlignment(basis, eigvals, rank)


@dataclass(frozen=True)
class FeatureStats:
    """Per-dimension mean of y*x and total covariance with all dimensions."""

    mean_yx: np.ndarray
    total_cov: np.ndarray
    count: int


def feature_stats(dataset: LabeledDataset) -> FeatureStats:
    if len(dataset) < 2:
        raise ValueError("need at least two samples")
    mean_yx = dataset.products().mean(axis=0)
    centered = dataset.features - dataset.features.mean(axis=0)
    row_sums = centered.sum(axis=1)
    total = centered.T @ row_sums / (len(dataset) - 1)
    return FeatureStats(mean_yx, total, len(dataset))


def export_csv(dataset: LabeledDataset, path):
    """dim_0..dim_{d-1}, label rows."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"dim_{i}" for i in range(dataset.d)] + ["label"])
        for x, y in zip(dataset.features, dataset.labels):
            writer.writerow(list(x) + [int(y)])


def export_manifest(path, source_files, class_pair, info: PreprocessInfo):
    """JSON sidecar recording provenance and the alignment sign vector."""
    with open(path, "w") as f:
        json.dump(
            {
                "source_files": [str(p) for p in source_files],
                "class_pair": list(class_pair),
                "alignment_signs": info.signs.astype(int).tolist(),
            },
            f,
            indent=2,
        )
