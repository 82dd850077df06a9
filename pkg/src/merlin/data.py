"""MNIST IDX loading, continual task streams, and the exemplar reservoir."""
from __future__ import annotations

import gzip
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DATA_ROOT_ENV = "MERLIN_DATA_ROOT"


class IdxFormatError(ValueError):
    pass


class IdxLengthError(ValueError):
    pass


class IdxConsistencyError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(buf: bytes, expected_magic: int, what: str = "idx") -> np.ndarray:
    if len(buf) < 8:
        raise IdxLengthError(f"{what}: {len(buf)} bytes is too short for an IDX header")
    magic = int.from_bytes(buf[:4], "big")
    if magic != expected_magic:
        raise IdxFormatError(f"{what}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = buf[3]
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise IdxLengthError(f"{what}: truncated header")
    dims = [int.from_bytes(buf[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    need = int(np.prod(dims))
    if len(buf) - head != need:
        raise IdxLengthError(f"{what}: {len(buf) - head} payload bytes, header promises {need}")
    return np.frombuffer(buf, dtype=np.uint8, offset=head).reshape(dims)


@dataclass
class RawDataset:
    images: np.ndarray   # (n, 784) float64 in [0, 1]
    labels: np.ndarray   # (n,) int64


def load_idx(images_path, labels_path) -> RawDataset:
    imgs = parse_idx(_read_bytes(images_path), IMAGE_MAGIC, str(images_path))
    labs = parse_idx(_read_bytes(labels_path), LABEL_MAGIC, str(labels_path))
    if imgs.shape[0] != labs.shape[0]:
        raise IdxConsistencyError(f"{imgs.shape[0]} images but {labs.shape[0]} labels")
    return RawDataset(imgs.reshape(len(imgs), -1).astype(np.float64) / 255.0, labs.astype(np.int64))


_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def data_root(root=None) -> Path:
    root = root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise FileNotFoundError(f"set {DATA_ROOT_ENV} to the directory holding the MNIST IDX files")
    return Path(root)


def _find(root: Path, stem: str) -> Path:
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (root / cand).exists():
            return root / cand
    raise FileNotFoundError(f"{stem} not found under {root}")


_CACHE: dict = {}


def load_mnist(root=None) -> tuple[RawDataset, RawDataset]:
    root = data_root(root)
    key = str(root.resolve())
    if key not in _CACHE:
        _CACHE[key] = tuple(load_idx(_find(root, i), _find(root, l)) for i, l in (_NAMES["train"], _NAMES["test"]))
    return _CACHE[key]


@dataclass
class TaskDataset:
    task_index: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: tuple[int, ...]
    meta: dict = field(default_factory=dict)


@dataclass
class TaskSequence:
    name: str
    tasks: list[TaskDataset]
    n_classes: int
    class_incremental: bool


def build_split_mnist(train: RawDataset, test: RawDataset, rng: np.random.Generator,
                      n_per_task: int = 1000, n_tasks: int = 5) -> TaskSequence:
    tasks = []
    for j in range(n_tasks):
        cls = (2 * j, 2 * j + 1)
        pool = np.flatnonzero(np.isin(train.labels, cls))
        if len(pool) < n_per_task:
            raise ValueError(f"task {j}: only {len(pool)} training images for classes {cls}")
        pick = rng.choice(pool, n_per_task, replace=False)
        te = np.isin(test.labels, cls)
        tasks.append(TaskDataset(j, train.images[pick], train.labels[pick], test.images[te], test.labels[te],
                                 cls, {"train_indices": pick}))
    return TaskSequence("split_mnist", tasks, 10, True)


def build_permuted_mnist(train: RawDataset, test: RawDataset, rng: np.random.Generator,
                         n_per_task: int = 1000, n_tasks: int = 10) -> TaskSequence:
    tasks = []
    d = train.images.shape[1]
    for j in range(n_tasks):
        perm = rng.permutation(d)
        pick = rng.choice(len(train.labels), n_per_task, replace=False)
        tasks.append(TaskDataset(j, train.images[pick][:, perm], train.labels[pick], test.images[:, perm],
                                 test.labels, tuple(range(10)), {"perm": perm, "train_indices": pick}))
    return TaskSequence("permuted_mnist", tasks, 10, False)


def build_synthetic_tasks(rng: np.random.Generator, k: int = 3, classes_per_task: int = 2, dim: int = 20,
                          n: int = 200, n_test: int = 200, separation: float = 6.0) -> TaskSequence:
    """Gaussian blobs (unit variance) per class; class means sit ``separation`` apart on random directions."""
    n_classes = k * classes_per_task
    dirs = rng.normal(size=(n_classes, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = dirs * separation / np.sqrt(2.0)
    tasks = []
    for j in range(k):
        cls = tuple(range(j * classes_per_task, (j + 1) * classes_per_task))

        def draw(m):
            y = rng.choice(cls, m)
            return means[y] + rng.normal(size=(m, dim)), y.astype(np.int64)

        xtr, ytr = draw(n)
        xte, yte = draw(n_test)
        tasks.append(TaskDataset(j, xtr, ytr, xte, yte, cls, {"means": means[list(cls)]}))
    return TaskSequence("synthetic", tasks, n_classes, True)


class Reservoir:
    """Uniform fixed-capacity sample of a stream seen once (algorithm R)."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        self.capacity, self.rng = capacity, rng
        self.items: list = []
        self.seen = 0

    def __call__(self, x, y):
        self.seen += 1
        if len(self.items) < self.capacity:
            self.items.append((x, y))
        else:
            j = int(self.rng.integers(self.seen))
            if j < self.capacity:
                self.items[j] = (x, y)


class ExemplarStore:
    """Per-task exemplars under a total budget split evenly across tasks seen."""

    def __init__(self, budget: int = 200):
        self.budget = budget
        self.per_task: dict[int, list] = {}

    def quota(self, k: int) -> int:
        return self.budget // max(k, 1)

    def __len__(self):
        return sum(len(v) for v in self.per_task.values())

    def arrays(self, tasks=None):
        keys = sorted(self.per_task) if tasks is None else list(tasks)
        items = [it for t in keys for it in self.per_task.get(t, [])]
        if not items:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return np.stack([x for x, _ in items]), np.array([y for _, y in items], dtype=np.int64)


def update_exemplars(store: ExemplarStore, task_index: int, reservoir: Reservoir,
                     rng: np.random.Generator) -> ExemplarStore:
    """Admit the new task's reservoir and shrink older allocations to the even split."""
    k = len(store.per_task | {task_index: None})
    q = store.quota(k)
    for t, items in store.per_task.items():
        if len(items) > q:
            keep = np.sort(rng.choice(len(items), q, replace=False))
            store.per_task[t] = [items[i] for i in keep]
    items = reservoir.items
    if len(items) > q:
        keep = np.sort(rng.choice(len(items), q, replace=False))
        items = [items[i] for i in keep]
    store.per_task[task_index] = list(items)
    return store
