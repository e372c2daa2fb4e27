"""Dataset loading (IDX), normalization, label corruption, and task generation."""

import csv
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


class IdxParseError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, d) float
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels"
            )
        if self.images.shape[0] == 0:
            raise ValueError("empty dataset")

    @property
    def n(self):
        return self.images.shape[0]


def _read_idx(path, expected_magic):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4:
        raise IdxParseError(f"{path}: truncated header at byte 0")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != expected_magic:
        raise IdxParseError(f"{path}: magic {magic} at byte 0, expected {expected_magic}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(blob) < header_len:
        raise IdxParseError(f"{path}: truncated dimension header at byte {len(blob)}")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    count = int(np.prod(dims))
    if len(blob) != header_len + count:
        raise IdxParseError(
            f"{path}: payload ends at byte {len(blob)}, expected {header_len + count}"
        )
    data = np.frombuffer(blob, dtype=np.uint8, offset=header_len)
    return data.reshape(dims)


def load_idx(images_path, labels_path, dtype=np.float64):
    """Big-endian IDX pair -> Dataset with pixels scaled to [0, 1]."""
    raw_images = _read_idx(images_path, IDX_IMAGE_MAGIC)
    raw_labels = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if raw_images.shape[0] != raw_labels.shape[0]:
        raise IdxParseError(
            f"count mismatch: {raw_images.shape[0]} images vs {raw_labels.shape[0]} labels"
        )
    n = raw_images.shape[0]
    images = (raw_images.reshape(n, -1).astype(dtype)) / dtype(255.0)
    labels = raw_labels.astype(np.int64)
    return Dataset(images, labels, int(labels.max()) + 1)


def save_idx_images(path, images_u8):
    """images_u8: (n, h, w) uint8."""
    n, h, w = images_u8.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(np.ascontiguousarray(images_u8, dtype=np.uint8).tobytes())


def save_idx_labels(path, labels_u8):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels_u8)))
        f.write(np.ascontiguousarray(labels_u8, dtype=np.uint8).tobytes())


def normalize(train, test=None):
    """Subtract the train split's per-pixel mean from train (and test)."""
    mean = train.images.mean(axis=0)
    new_train = Dataset(train.images - mean, train.labels.copy(), train.num_classes)
    if test is None:
        return new_train
    new_test = Dataset(test.images - mean, test.labels.copy(), test.num_classes)
    return new_train, new_test


# ---------------------------------------------------------------------------
# label corruption (training split only; images are never touched)


def corrupt_symmetric(labels, rate, num_classes, rng):
    """Flip each label with probability `rate` uniformly to one of the other
    num_classes - 1 classes. Returns (new labels, flip mask)."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    if rate > 0 and num_classes < 2:
        raise ValueError("need at least 2 classes to corrupt labels")
    labels = np.asarray(labels, dtype=np.int64)
    mask = rng.random(labels.shape[0]) < rate
    new = labels.copy()
    # offset in [1, C-1] guarantees the flipped label differs from the original
    offsets = rng.integers(1, num_classes, size=labels.shape[0])
    new[mask] = (labels[mask] + offsets[mask]) % num_classes
    return new, mask


def corrupt_asymmetric(labels, rate, num_classes, rng):
    """Flip each label with probability `rate` to (label + 1) mod num_classes."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    if rate > 0 and num_classes < 2:
        raise ValueError("need at least 2 classes to corrupt labels")
    labels = np.asarray(labels, dtype=np.int64)
    mask = rng.random(labels.shape[0]) < rate
    new = labels.copy()
    new[mask] = (labels[mask] + 1) % num_classes
    return new, mask


def export_corruption_manifest(path, original, corrupted):
    """CSV of (index, original, corrupted) for every flipped label."""
    original = np.asarray(original)
    corrupted = np.asarray(corrupted)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "original", "corrupted"])
        for i in np.nonzero(original != corrupted)[0]:
            w.writerow([int(i), int(original[i]), int(corrupted[i])])


# ---------------------------------------------------------------------------
# continual-learning task sequences


@dataclass
class TaskSequence:
    kind: str  # "permuted" | "split"
    num_tasks: int
    permutations: list = None  # per task, pixel index permutation
    class_pairs: list = None  # per task, tuple of original labels


def make_permuted_tasks(num_pixels, num_tasks, rng):
    """Task 0 is the identity (plain base task); the rest are independent
    uniform random pixel permutations."""
    if num_tasks < 1:
        raise ValueError("num_tasks must be >= 1")
    perms = [np.arange(num_pixels)]
    for _ in range(num_tasks - 1):
        perms.append(rng.permutation(num_pixels))
    return TaskSequence(kind="permuted", num_tasks=num_tasks, permutations=perms)


def apply_permutation(dataset, perm):
    return Dataset(dataset.images[:, perm], dataset.labels, dataset.num_classes)


def make_split_tasks(class_pairs):
    """Disjoint class groups, one head per task."""
    seen = set()
    for pair in class_pairs:
        for c in pair:
            if c in seen:
                raise ValueError(f"class {c} appears in more than one task")
            seen.add(c)
    return TaskSequence(
        kind="split", num_tasks=len(class_pairs), class_pairs=[tuple(p) for p in class_pairs]
    )


def split_task_dataset(dataset, classes):
    """Sub-dataset of the given classes with labels remapped to 0..len-1."""
    classes = tuple(classes)
    sel = np.isin(dataset.labels, classes)
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[c] for c in dataset.labels[sel]], dtype=np.int64)
    return Dataset(dataset.images[sel], labels, len(classes))


def task_dataset(sequence, dataset, task):
    """Materialize one task's view of a dataset; returns (Dataset, head index)."""
    if sequence.kind == "permuted":
        return apply_permutation(dataset, sequence.permutations[task]), 0
    return split_task_dataset(dataset, sequence.class_pairs[task]), task
