"""Datasets: the two-frequency circle, IDX (Fashion-MNIST) files, and the
cluster-based relabelling that makes half of the classes hard."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core_math import DTYPE

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

LOW_FREQ, HIGH_FREQ = "low", "high"


@dataclass(frozen=True)
class CircleDataset:
    angles: np.ndarray   # radians, ascending in [0, 2*pi)
    X: np.ndarray        # (n, 2) points on the unit circle
    y: np.ndarray        # (n,)
    low_freq: np.ndarray  # bool, angle < pi

    @property
    def n(self) -> int:
        return self.angles.shape[0]

    @property
    def region(self) -> list[str]:
        return [LOW_FREQ if f else HIGH_FREQ for f in self.low_freq]


def circle_target(theta):
    """sin(theta) on the upper half, sin(pi + 9 (theta - pi)) on the lower half."""
    theta = np.asarray(theta, dtype=DTYPE)
    return np.where(theta < np.pi, np.sin(theta), np.sin(np.pi + 9.0 * (theta - np.pi)))


def gen_circle(n: int = 500) -> CircleDataset:
    if n < 2:
        raise ValueError("the circle dataset needs at least two points")
    theta = 2.0 * np.pi * np.arange(n, dtype=DTYPE) / n
    X = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return CircleDataset(theta, X, circle_target(theta), theta < np.pi)


def write_circle_csv(ds: CircleDataset, path) -> Path:
    lines = ["angle,x1,x2,y,region"]
    for t, (a, b), y, r in zip(ds.angles, ds.X, ds.y, ds.region):
        lines.append(f"{t:.17g},{a:.17g},{b:.17g},{y:.17g},{r}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


# --- IDX -------------------------------------------------------------------

class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatch(IdxError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse a big-endian IDX file of unsigned bytes."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IdxTruncatedError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.uint8)
    magic = 0x00000800 | data.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{data.ndim}I", *data.shape))
        f.write(data.tobytes())


@dataclass
class LabeledImageDataset:
    """Flattened images in [0, 1] with labels 1..10.

    ``original`` keeps the source class (1..10) so relabelled points can be
    traced back; ``simple`` marks the untouched region; ``is_train`` is the
    split tag.
    """

    images: np.ndarray
    labels: np.ndarray
    original: np.ndarray
    simple: np.ndarray
    is_train: np.ndarray

    def __post_init__(self):
        n = self.images.shape[0]
        if not (len(self.labels) == len(self.original) == len(self.simple) == len(self.is_train) == n):
            raise ValueError("per-image fields must all have one entry per image")
        if n and (self.labels.min() < 1 or self.labels.max() > 10):
            raise ValueError("labels must lie in 1..10")

    @property
    def n(self) -> int:
        return self.images.shape[0]

    def subset(self, mask_or_idx) -> "LabeledImageDataset":
        return LabeledImageDataset(self.images[mask_or_idx], self.labels[mask_or_idx],
                                   self.original[mask_or_idx], self.simple[mask_or_idx],
                                   self.is_train[mask_or_idx])

    @classmethod
    def concat(cls, a: "LabeledImageDataset", b: "LabeledImageDataset") -> "LabeledImageDataset":
        return cls(*(np.concatenate([getattr(a, f), getattr(b, f)])
                     for f in ("images", "labels", "original", "simple", "is_train")))


def load_idx(images_path, labels_path, train: bool = True) -> LabeledImageDataset:
    imgs = read_idx(images_path, IDX_IMAGES_MAGIC)
    labs = read_idx(labels_path, IDX_LABELS_MAGIC)
    if imgs.ndim != 3 or labs.ndim != 1:
        raise IdxError("expected a 3-d image array and a 1-d label array")
    if imgs.shape[0] != labs.shape[0]:
        raise IdxCountMismatch(f"{imgs.shape[0]} images but {labs.shape[0]} labels")
    n = imgs.shape[0]
    labels = labs.astype(np.int64) + 1
    return LabeledImageDataset(imgs.reshape(n, -1).astype(DTYPE) / 255.0, labels, labels.copy(),
                               labels <= 5, np.full(n, train))


FMNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_fmnist(directory) -> dict[str, tuple[Path, Path]] | None:
    """Locate the four standard Fashion-MNIST files (optionally gzipped)."""
    directory = Path(directory)
    found = {}
    for split, names in FMNIST_FILES.items():
        pair = []
        for name in names:
            for cand in (directory / name, directory / f"{name}.gz"):
                if cand.exists():
                    pair.append(cand)
                    break
        if len(pair) != 2:
            return None
        found[split] = tuple(pair)
    return found


def load_fmnist(directory) -> LabeledImageDataset:
    files = find_fmnist(directory)
    if files is None:
        raise FileNotFoundError(f"Fashion-MNIST IDX files not found in {directory}")
    return LabeledImageDataset.concat(load_idx(*files["train"], train=True),
                                      load_idx(*files["test"], train=False))


# --- clustering ------------------------------------------------------------

@dataclass
class KMeansResult:
    assignment: np.ndarray
    centroids: np.ndarray
    objective: list[float]   # after each assignment step
    iterations: int


def _sq_dists(points, centroids):
    return (np.sum(points**2, axis=1)[:, None] - 2.0 * points @ centroids.T
            + np.sum(centroids**2, axis=1)[None, :]).clip(min=0.0)


def kmeans(points, k: int, rng: np.random.Generator, max_iters: int = 50) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding; stops when assignments repeat."""
    points = np.asarray(points, dtype=DTYPE)
    n = points.shape[0]
    if n == 0:
        raise ValueError("kmeans needs at least one point")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be between 1 and the number of points ({n})")

    centroids = [points[rng.integers(n)]]
    closest = np.sum((points - centroids[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        idx = rng.choice(n, p=closest / total) if total > 0 else rng.integers(n)
        centroids.append(points[idx])
        closest = np.minimum(closest, np.sum((points - points[idx]) ** 2, axis=1))
    C = np.array(centroids)

    assign = None
    objective = []
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(points, C)
        new = np.argmin(d, axis=1)
        objective.append(float(d[np.arange(n), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = points[assign == j]
            if len(members):
                C[j] = members.mean(axis=0)
    return KMeansResult(assign, C, objective, it)


def modify_fmnist_labels(ds: LabeledImageDataset, rng: np.random.Generator,
                         clusters_per_class: int = 5, max_iters: int = 50) -> tuple[LabeledImageDataset, dict]:
    """Split each of classes 6..10 into clusters and give the 25 clusters
    labels 6..10, each label used exactly five times in a seeded random order.

    Training images of those classes take their cluster's label; test
    images take the label of the nearest centroid of their own class.
    Returns the relabelled dataset and ``{(class, cluster): label}``.
    """
    hard_classes = range(6, 11)
    for cls in range(1, 11):
        if not np.any((ds.original == cls) & ds.is_train):
            raise ValueError(f"class {cls} has no training images")
    pool = rng.permutation(np.repeat(np.arange(6, 11), clusters_per_class))

    labels = ds.labels.copy()
    mapping = {}
    for ci, cls in enumerate(hard_classes):
        tr = np.flatnonzero((ds.original == cls) & ds.is_train)
        km = kmeans(ds.images[tr], clusters_per_class, rng, max_iters)
        cluster_labels = pool[ci * clusters_per_class:(ci + 1) * clusters_per_class]
        for j, lab in enumerate(cluster_labels):
            mapping[(cls, j)] = int(lab)
        labels[tr] = cluster_labels[km.assignment]
        te = np.flatnonzero((ds.original == cls) & ~ds.is_train)
        if len(te):
            labels[te] = cluster_labels[np.argmin(_sq_dists(ds.images[te], km.centroids), axis=1)]
    out = LabeledImageDataset(ds.images, labels, ds.original.copy(), ds.original <= 5, ds.is_train.copy())
    return out, mapping
