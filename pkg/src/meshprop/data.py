"""Datasets, Dirichlet partitioning across devices, and backdoor injection."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from meshprop.rng import derive_rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


class IdxMagicError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class IdxCountMismatchError(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = "blobs"
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.features.shape}")
        if len(self.features) != len(self.labels):
            raise DataError("features and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"labels must lie in 0..{self.n_classes - 1}")
        if self.image_shape is not None and math.prod(self.image_shape) != self.features.shape[1]:
            raise DataError(f"image_shape {self.image_shape} does not match d={self.features.shape[1]}")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        return replace(self, features=self.features[indices], labels=self.labels[indices])


@dataclass(frozen=True)
class DeviceShard:
    device: int
    indices: np.ndarray
    backdoored: np.ndarray = None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", idx)
        flags = np.zeros(len(idx), dtype=bool) if self.backdoored is None else np.asarray(self.backdoored, bool)
        if flags.shape != idx.shape:
            raise DataError("backdoored flags must align with indices")
        object.__setattr__(self, "backdoored", flags)

    def __len__(self):
        return len(self.indices)

    def label_histogram(self, dataset: Dataset) -> np.ndarray:
        return np.bincount(dataset.labels[self.indices], minlength=dataset.n_classes)

    def to_manifest(self) -> dict:
        return {
            "device_id": self.device,
            "indices": self.indices.tolist(),
            "backdoored_indices": self.indices[self.backdoored].tolist(),
        }


@dataclass(frozen=True)
class PartitionSpec:
    alpha_l: float = 1000.0
    alpha_s: float = 1000.0
    n_devices: int = 1
    ood_device: int | None = None
    Q: float = 0.1
    seed: int = 0
    budget: int | None = None

    def __post_init__(self):
        if not self.alpha_l > 0:
            raise DataError(f"alpha_l must be > 0, got {self.alpha_l}")
        if not self.alpha_s > 0:
            raise DataError(f"alpha_s must be > 0, got {self.alpha_s}")
        if not 0.0 <= self.Q <= 1.0:
            raise DataError(f"Q must be in [0, 1], got {self.Q}")
        if self.n_devices < 1:
            raise DataError(f"n_devices must be >= 1, got {self.n_devices}")


@dataclass(frozen=True)
class SequenceSample:
    tokens: list[int]
    trigger: list[int] = field(default_factory=lambda: [100])
    target: int = 2


# -- loading ------------------------------------------------------------------

def _read_idx(path, expected_magic: int, header_ints: int) -> tuple[list[int], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    hdr_len = 4 * (1 + header_ints)
    if len(raw) < hdr_len:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = list(struct.unpack(f">{header_ints}I", raw[4:hdr_len]))
    payload = raw[hdr_len:]
    need = math.prod(dims)
    if len(payload) < need:
        raise IdxTruncatedError(f"{path}: payload has {len(payload)} bytes, header promises {need}")
    return dims, payload[:need]


def load_idx(images_path, labels_path, name: str = "mnist", n_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (MNIST layout); pixels are scaled to [0, 1]."""
    (count, rows, cols), pix = _read_idx(images_path, IMAGES_MAGIC, 3)
    (n_labels,), lab = _read_idx(labels_path, LABELS_MAGIC, 1)
    if count != n_labels:
        raise IdxCountMismatchError(f"{images_path} has {count} images but {labels_path} has {n_labels} labels")
    x = np.frombuffer(pix, dtype=np.uint8).reshape(count, rows * cols).astype(np.float64) / 255.0
    y = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    return Dataset(x, y, n_classes, name, (rows, cols))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (count, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, count, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(labels))
                                  + np.asarray(labels, dtype=np.uint8).tobytes())


def load_mnist_dir(root, split: str = "train", name: str = "mnist") -> Dataset:
    prefix = "train" if split == "train" else "t10k"
    root = Path(root)
    return load_idx(root / f"{prefix}-images-idx3-ubyte", root / f"{prefix}-labels-idx1-ubyte", name=name)


def _grid_shape(d: int) -> tuple[int, int]:
    r = max(k for k in range(1, math.isqrt(d) + 1) if d % k == 0)
    return r, d // r


BLOB_SCALE = 3.0


def synth_blobs(n_samples: int, C: int, d: int, spread: float, seed: int) -> Dataset:
    """Gaussian class clusters centred on the vertices of a scaled simplex.

    Class ``c`` sits at ``BLOB_SCALE * e_c`` (the c-th unit vector, folded modulo ``d`` when
    ``C > d`` with a per-fold offset) so all classes are equidistant for
    ``C <= d``. Class counts are balanced to within one sample. Features are
    laid out on a near-square grid so a corner trigger can be stamped on them.
    """
    if C < 2 or n_samples < C or d < 2 or not spread > 0:
        raise DataError(f"synth_blobs needs n_samples >= C >= 2, d >= 2, spread > 0 "
                        f"(got n={n_samples}, C={C}, d={d}, spread={spread})")
    means = np.zeros((C, d))
    for c in range(C):
        means[c, c % d] = BLOB_SCALE
        means[c, (c // d + c) % d] += 0.5 * BLOB_SCALE * (c // d)
    rng = derive_rng(seed, -1, -1, "data:blobs")
    labels = np.arange(n_samples) % C
    labels = labels[rng.permutation(n_samples)]
    x = means[labels] + spread * rng.standard_normal((n_samples, d))
    return Dataset(x, labels.astype(np.int64), C, "blobs", _grid_shape(d))


# -- partitioning ---------------------------------------------------------------

def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    raw = weights * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        # stable sort keeps smaller index first on equal remainders
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def partition(dataset: Dataset, spec: PartitionSpec) -> list[DeviceShard]:
    """Split ``dataset`` across devices: Dirichlet counts, then Dirichlet labels."""
    n = len(dataset)
    if n == 0:
        raise DataError("cannot partition an empty dataset")
    if spec.n_devices > n:
        raise DataError(f"n_devices={spec.n_devices} exceeds dataset size {n}")
    budget = n if spec.budget is None else int(spec.budget)
    if not 1 <= budget <= n:
        raise DataError(f"budget must be in 1..{n}, got {budget}")
    rng = derive_rng(spec.seed, -1, -1, "data:partition")

    counts = _largest_remainder(rng.dirichlet(np.full(spec.n_devices, spec.alpha_s)), budget)

    C = dataset.n_classes
    pools = [list(rng.permutation(np.flatnonzero(dataset.labels == c))) for c in range(C)]
    shards = []
    for dev in range(spec.n_devices):
        quota = _largest_remainder(rng.dirichlet(np.full(C, spec.alpha_l)), int(counts[dev]))
        taken = []
        short = 0
        for c in range(C):
            k = min(int(quota[c]), len(pools[c]))
            taken.extend(pools[c][len(pools[c]) - k:])
            del pools[c][len(pools[c]) - k:]
            short += int(quota[c]) - k
        for _ in range(short):
            c = max(range(C), key=lambda j: (len(pools[j]), -j))
            taken.append(pools[c].pop())
        shards.append(DeviceShard(dev, np.sort(np.array(taken, dtype=np.int64))))
    return shards


def write_manifest(shards, path) -> None:
    Path(path).write_text(json.dumps([s.to_manifest() for s in shards]))


# -- backdoors -------------------------------------------------------------------

def _n_flagged(Q: float, m: int) -> int:
    # the epsilon keeps float noise (0.1 * 1000 = 100.00000000000001) from rounding up
    return min(m, max(1, math.ceil(Q * m - 1e-9)))


def stamp_trigger(features: np.ndarray, image_shape: tuple[int, int], size: int) -> np.ndarray:
    """Copy of ``features`` with the top-left ``size`` x ``size`` block set to 1.0."""
    rows, cols = image_shape
    out = np.array(features, dtype=np.float64, copy=True)
    imgs = out.reshape(len(out), rows, cols)
    imgs[:, :size, :size] = 1.0
    return out


def _check_trigger(dataset: Dataset, Q: float, size: int) -> None:
    if dataset.image_shape is None:
        raise DataError(f"dataset {dataset.name!r} has no image shape; cannot place a pixel trigger")
    if not 0.0 < Q <= 1.0:
        raise DataError(f"Q must be in (0, 1], got {Q}")
    if not 1 <= size <= min(dataset.image_shape):
        raise DataError(f"trigger size {size} exceeds image dimensions {dataset.image_shape}")


def backdoor_images(shard: DeviceShard, dataset: Dataset, Q: float, trigger_size: int = 3,
                    target: int = 0, seed: int = 0) -> tuple[DeviceShard, Dataset]:
    """Stamp a corner trigger on ceil(Q*|shard|) of the shard's images and relabel them.

    Returns the flagged shard and a copy of ``dataset`` holding the altered
    rows; the input dataset is left untouched.
    """
    if len(shard) == 0:
        raise DataError(f"device {shard.device} has an empty shard; nothing to backdoor")
    _check_trigger(dataset, Q, trigger_size)
    rng = derive_rng(seed, shard.device, -1, "data:backdoor")
    k = _n_flagged(Q, len(shard))
    pick = np.sort(rng.choice(len(shard), size=k, replace=False))
    rows = shard.indices[pick]
    features = dataset.features.copy()
    features[rows] = stamp_trigger(features[rows], dataset.image_shape, trigger_size)
    labels = dataset.labels.copy()
    labels[rows] = target
    flags = shard.backdoored.copy()
    flags[pick] = True
    return replace(shard, backdoored=flags), replace(dataset, features=features, labels=labels)


def backdoor_sequence(s, t, T: int) -> list[int]:
    """Overwrite everything after the first occurrence of trigger ``t`` with token ``T``."""
    s = list(s)
    t = list(t)
    if not t or len(t) > len(s):
        return s
    for start in range(len(s) - len(t) + 1):
        if s[start:start + len(t)] == t:
            end = start + len(t)
            return s[:end] + [T] * (len(s) - end)
    return s


def build_test_sets(clean_test: Dataset, Q: float, trigger_size: int = 3, target: int = 0,
                    seed: int = 0) -> tuple[Dataset, Dataset]:
    """Return (test_IID, test_OOD): the clean set and a backdoored Q-fraction of it."""
    if len(clean_test) == 0:
        raise DataError("clean test set is empty")
    _check_trigger(clean_test, Q, trigger_size)
    rng = derive_rng(seed, -1, -1, "data:test_ood")
    k = _n_flagged(Q, len(clean_test))
    pick = np.sort(rng.choice(len(clean_test), size=k, replace=False))
    feats = stamp_trigger(clean_test.features[pick], clean_test.image_shape, trigger_size)
    ood = replace(clean_test, features=feats, labels=np.full(k, target, dtype=np.int64),
                  name=f"{clean_test.name}-ood")
    return clean_test, ood
