"""Datasets: IDX files, two-view splits, corrupted two-view MNIST, and small discrete tasks."""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IdxFormatError(ValueError):
    pass


@dataclass
class ViewSample:
    views: list[np.ndarray]
    label: int


@dataclass
class MultiViewDataset:
    """K aligned view arrays (first axis = example) plus integer labels."""

    views: list[np.ndarray]
    labels: np.ndarray
    num_classes: int = 10
    symbols: np.ndarray | None = None  # discrete symbol indices [N, K], synthetic tasks only

    def __post_init__(self):
        if not self.views:
            raise ValueError("need at least one view")
        n = len(self.labels)
        if any(len(v) != n for v in self.views):
            raise ValueError("views and labels disagree on example count")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def K(self) -> int:
        return len(self.views)

    def __getitem__(self, i: int) -> ViewSample:
        return ViewSample([v[i] for v in self.views], int(self.labels[i]))

    def subset(self, idx) -> MultiViewDataset:
        sym = None if self.symbols is None else self.symbols[idx]
        return MultiViewDataset([v[idx] for v in self.views], self.labels[idx], self.num_classes, sym)

    def flat_views(self) -> list[np.ndarray]:
        return [v.reshape(len(v), -1) for v in self.views]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for v in self.views:
            h.update(np.ascontiguousarray(v, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]


@dataclass
class DatasetSpec:
    source: str = "idx-files"  # idx-files | corrupted-mnist | synthetic-discrete
    data_dir: str | None = None
    K: int = 2
    views: str = "split"  # idx-files only: "split" (two halves) or "full" (K = 1)
    train_size: int | None = None
    val_size: int = 0
    test_size: int | None = None
    mask_size: int | None = None
    noise_high: float | None = None
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        has_corruption = self.mask_size is not None or self.noise_high is not None
        if self.source == "corrupted-mnist":
            if self.mask_size is None:
                self.mask_size = 15
            if self.noise_high is None:
                self.noise_high = 3.0
        elif has_corruption:
            raise ValueError("corruption parameters are only valid for source='corrupted-mnist'")
        if self.source not in ("idx-files", "corrupted-mnist", "synthetic-discrete"):
            raise ValueError(f"unknown dataset source {self.source!r}")


# ----------------------------------------------------------------------- IDX
def _open(path):
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic: int) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file too short")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise IdxFormatError(f"{path}: {len(raw) - header} data bytes for dims {dims}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Images as float64 [N, H, W] scaled to [0, 1]; labels as int64 [N]."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    return images.astype(np.float64) / 255.0, labels.astype(np.int64)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_mnist(data_dir) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    d = Path(data_dir)
    train = load_idx(d / MNIST_FILES["train_images"], d / MNIST_FILES["train_labels"])
    test = load_idx(d / MNIST_FILES["test_images"], d / MNIST_FILES["test_labels"])
    return train, test


# --------------------------------------------------------------------- views
def split_vertical(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left and right column blocks; an odd extra column goes to the left view.

    Works on one image [H, W] or a stack [..., H, W].
    """
    width = image.shape[-1]
    if width < 2:
        raise ValueError("need at least two columns to split")
    cut = (width + 1) // 2
    return image[..., :cut], image[..., cut:]


def corrupt_views(image: np.ndarray, rng: np.random.Generator, mask_size: int = 15,
                  noise_high: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """View 1 occludes a random mask_size square with zeros; view 2 adds U[0, noise_high] noise, clipped to [0, 1]."""
    h, w = image.shape
    top = rng.integers(0, h - mask_size + 1)
    left = rng.integers(0, w - mask_size + 1)
    view1 = image.copy()
    view1[top : top + mask_size, left : left + mask_size] = 0.0
    noise = rng.uniform(0.0, noise_high, size=image.shape)
    view2 = np.clip(image + noise, 0.0, 1.0)
    return view1, view2


def two_view_mnist(data_dir, val_size: int = 0, seed: int = 0, train_size: int | None = None,
                   full: bool = False) -> tuple[MultiViewDataset, MultiViewDataset, MultiViewDataset | None]:
    """Vertically split MNIST (or the full image as a single view). Returns (train, test, val)."""
    (xtr, ytr), (xte, yte) = load_mnist(data_dir)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ytr))
    val_idx, tr_idx = perm[:val_size], perm[val_size:]
    if train_size is not None:
        tr_idx = tr_idx[:train_size]

    def build(x, y):
        views = [x] if full else list(split_vertical(x))
        return MultiViewDataset(views, y)

    val = build(xtr[val_idx], ytr[val_idx]) if val_size else None
    return build(xtr[tr_idx], ytr[tr_idx]), build(xte, yte), val


def corrupted_two_view_mnist(data_dir, seed: int = 0, train_size: int = 50_000, test_size: int = 20_000,
                             mask_size: int = 15, noise_high: float = 3.0) -> tuple[MultiViewDataset, MultiViewDataset]:
    """Corrupted two-view MNIST drawn from the pooled 70k images.

    Masks and noise are drawn once per example at generation time.
    """
    (xtr, ytr), (xte, yte) = load_mnist(data_dir)
    images = np.concatenate([xtr, xte])
    labels = np.concatenate([ytr, yte])
    if train_size + test_size > len(labels):
        raise ValueError("train_size + test_size exceeds the available images")
    rng = np.random.default_rng(seed)
    pick = rng.permutation(len(labels))[: train_size + test_size]
    v1 = np.empty((len(pick), 28, 28))
    v2 = np.empty((len(pick), 28, 28))
    for i, j in enumerate(pick):
        v1[i], v2[i] = corrupt_views(images[j], rng, mask_size, noise_high)
    ds = MultiViewDataset([v1, v2], labels[pick])
    return ds.subset(slice(0, train_size)), ds.subset(slice(train_size, None))


def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Shuffled minibatches; the order is a pure function of (seed, epoch)."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    for lo in range(0, n, batch_size):
        yield perm[lo : lo + batch_size]


def minibatch_stream(n: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    epoch = 0
    while True:
        yield from batch_indices(n, batch_size, seed, epoch)
        epoch += 1


# --------------------------------------------------------- synthetic discrete
@dataclass
class DiscreteTable:
    """p(y) and per-view p(x_k | y); views are conditionally independent given y."""

    prior: np.ndarray  # [|Y|]
    channels: list[np.ndarray]  # each [|Y|, |X_k|]

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=np.float64)
        self.channels = [np.asarray(c, dtype=np.float64) for c in self.channels]
        if abs(self.prior.sum() - 1.0) > 1e-9 or np.any(self.prior < 0):
            raise ValueError("prior is not a normalized distribution")
        for c in self.channels:
            if c.shape[0] != len(self.prior):
                raise ValueError("channel rows must match the label alphabet")
            if np.any(c < 0) or np.any(np.abs(c.sum(axis=1) - 1.0) > 1e-9):
                raise ValueError("channel rows are not normalized distributions")
        if len(self.prior) > 8 or len(self.channels) > 3 or any(c.shape[1] > 16 for c in self.channels):
            raise ValueError("synthetic tables are limited to |Y|<=8, |X_k|<=16, K<=3")

    @property
    def K(self) -> int:
        return len(self.channels)

    @property
    def alphabet_sizes(self) -> list[int]:
        return [c.shape[1] for c in self.channels]

    def joint(self) -> np.ndarray:
        """Full table p(y, x_1, ..., x_K) with axes (y, x_1, ..., x_K)."""
        p = self.prior
        for k, c in enumerate(self.channels):
            shape = [len(self.prior)] + [1] * k + [c.shape[1]]
            p = p[..., None] * c.reshape(shape)
        return p

    def sample(self, num: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        y = rng.choice(len(self.prior), size=num, p=self.prior)
        xs = np.empty((num, self.K), dtype=np.int64)
        for k, c in enumerate(self.channels):
            cdf = np.cumsum(c, axis=1)
            u = rng.random(num)
            xs[:, k] = np.minimum((u[:, None] > cdf[y]).sum(axis=1), c.shape[1] - 1)
        return xs, y


def random_table(rng: np.random.Generator, num_classes: int = 4, alphabet: Sequence[int] = (6, 6),
                 concentration: float = 0.5) -> DiscreteTable:
    prior = rng.dirichlet(np.ones(num_classes))
    channels = [rng.dirichlet(np.full(a, concentration), size=num_classes) for a in alphabet]
    return DiscreteTable(prior, channels)


def synth_discrete(table: DiscreteTable, num: int, rng: np.random.Generator) -> tuple[MultiViewDataset, DiscreteTable]:
    """Sample a dataset whose views are one-hot symbols; returns it with its generating table."""
    xs, y = table.sample(num, rng)
    views = [np.eye(a)[xs[:, k]] for k, a in enumerate(table.alphabet_sizes)]
    return MultiViewDataset(views, y, num_classes=len(table.prior), symbols=xs), table
