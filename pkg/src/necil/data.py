"""Datasets and deterministic base + incremental class splits."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import IngestionError, RejectedInputError


@dataclass(frozen=True)
class TaskSpec:
    base_classes: int
    classes_per_task: int
    num_incremental_tasks: int
    seed: int
    tasks: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        seen: set[int] = set()
        for cs in self.tasks:
            if seen & set(cs):
                raise RejectedInputError(f"task classes overlap: {sorted(seen & set(cs))}")
            seen |= set(cs)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def class_order(self) -> list[int]:
        return [c for cs in self.tasks for c in cs]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = [list(cs) for cs in self.tasks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(d["base_classes"], d["classes_per_task"], d["num_incremental_tasks"], d["seed"],
                   tuple(tuple(int(c) for c in cs) for cs in d["tasks"]))


def build_split(dataset_labels, base_classes: int, classes_per_task: int, num_tasks: int,
                seed: int) -> TaskSpec:
    """Permute the classes with ``seed``; the first ``base_classes`` form task 1
    and each of the ``num_tasks`` incremental tasks takes the next chunk.
    """
    classes = np.unique(np.asarray(dataset_labels))
    if base_classes < 1 or classes_per_task < 0 or num_tasks < 0:
        raise RejectedInputError("base_classes must be >= 1 and task counts >= 0")
    if num_tasks and classes_per_task < 1:
        raise RejectedInputError("incremental tasks need classes_per_task >= 1")
    needed = base_classes + classes_per_task * num_tasks
    if needed > len(classes):
        raise RejectedInputError(f"split needs {needed} classes, dataset has {len(classes)}")
    order = classes[np.random.default_rng(seed).permutation(len(classes))].tolist()
    tasks = [tuple(order[:base_classes])]
    for t in range(num_tasks):
        start = base_classes + t * classes_per_task
        tasks.append(tuple(order[start:start + classes_per_task]))
    return TaskSpec(base_classes, classes_per_task, num_tasks, seed, tuple(tasks))


@dataclass
class Dataset:
    name: str
    x_train: torch.Tensor  # (N, H, W, C) float32, normalized
    y_train: torch.Tensor  # (N,) int64
    x_test: torch.Tensor
    y_test: torch.Tensor
    train_ids: torch.Tensor = field(default=None)
    test_ids: torch.Tensor = field(default=None)

    def __post_init__(self):
        for split, x, y in (("train", self.x_train, self.y_train), ("test", self.x_test, self.y_test)):
            if x.dim() != 4 or y.dim() != 1 or len(x) != len(y):
                raise RejectedInputError(
                    f"{split}: expected images (N, H, W, C) and labels (N,), got {tuple(x.shape)} and {tuple(y.shape)}")
        if self.train_ids is None:
            self.train_ids = torch.arange(len(self.y_train))
        if self.test_ids is None:
            self.test_ids = torch.arange(len(self.y_test)) + len(self.y_train)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.x_train.shape[1:])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for t in (self.x_train, self.y_train, self.x_test, self.y_test):
            h.update(t.contiguous().numpy().tobytes())
        return h.hexdigest()

    def subset(self, classes, split: str = "train") -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        x, y, ids = ((self.x_train, self.y_train, self.train_ids) if split == "train"
                     else (self.x_test, self.y_test, self.test_ids))
        mask = torch.isin(y, torch.as_tensor(list(classes), dtype=y.dtype))
        return x[mask], y[mask], ids[mask]


def synthetic_blobs(num_classes: int = 10, train_per_class: int = 100, test_per_class: int = 40,
                    image_size: int = 16, channels: int = 3, seed: int = 0,
                    noise: float = 0.35) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Class-conditioned textured blobs on a noisy, class-independent background.

    Each class has its own colour, grating orientation/frequency, blob centre
    and radius; samples jitter the position, contrast and background.
    """
    rng = np.random.default_rng(seed)
    s = image_size
    colors = rng.uniform(-1.0, 1.0, size=(num_classes, channels))
    theta = rng.uniform(0, np.pi, size=num_classes)
    freq = rng.uniform(0.15, 0.45, size=num_classes)
    centers = rng.uniform(0.3 * s, 0.7 * s, size=(num_classes, 2))
    radii = rng.uniform(0.18 * s, 0.3 * s, size=num_classes)
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")

    def draw(k: int, n: int) -> np.ndarray:
        out = np.empty((n, s, s, channels))
        for i in range(n):
            cy, cx = centers[k] + rng.uniform(-1.5, 1.5, size=2)
            mask = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radii[k] ** 2))
            phase = rng.uniform(0, 2 * np.pi)
            tex = np.sin(2 * np.pi * freq[k] * (xx * np.cos(theta[k]) + yy * np.sin(theta[k])) + phase)
            fg = (mask * (0.7 + 0.3 * tex))[..., None] * colors[k] * rng.uniform(0.8, 1.2)
            slope = rng.normal(0, 0.2, size=(2, channels))
            bg = (yy[..., None] / s - 0.5) * slope[0] + (xx[..., None] / s - 0.5) * slope[1]
            out[i] = fg + bg + rng.normal(0, noise, size=(s, s, channels))
        return out

    xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
    for k in range(num_classes):
        xs_tr.append(draw(k, train_per_class))
        ys_tr.append(np.full(train_per_class, k))
        xs_te.append(draw(k, test_per_class))
        ys_te.append(np.full(test_per_class, k))
    return (np.concatenate(xs_tr).astype(np.float32), np.concatenate(ys_tr).astype(np.int64),
            np.concatenate(xs_te).astype(np.float32), np.concatenate(ys_te).astype(np.int64))


def _normalize(x_train: np.ndarray, x_test: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    if x_train.dtype == np.uint8:
        x_train, x_test = x_train / 255.0, x_test / 255.0
    x_train = x_train.astype(np.float64)
    x_test = x_test.astype(np.float64)
    mean = x_train.mean(axis=(0, 1, 2))
    std = x_train.std(axis=(0, 1, 2)) + 1e-8
    norm = lambda a: torch.from_numpy(((a - mean) / std).astype(np.float32))  # noqa: E731
    return norm(x_train), norm(x_test)


def _load_npz(path: Path) -> tuple[np.ndarray, ...]:
    try:
        with np.load(path) as z:
            arrays = tuple(z[k] for k in ("x_train", "y_train", "x_test", "y_test"))
    except (OSError, ValueError, KeyError) as e:
        raise IngestionError(f"{path}: cannot read dataset ({e})") from e
    x_tr, y_tr, x_te, y_te = arrays
    if x_tr.ndim != 4 or len(x_tr) != len(y_tr) or len(x_te) != len(y_te):
        raise IngestionError(f"{path}: expected x_* of shape (N, H, W, C) matching y_* lengths")
    return arrays


def _load_torchvision(kind: str, root: str) -> tuple[np.ndarray, ...]:
    try:
        from torchvision import datasets
    except ImportError as e:
        raise IngestionError(f"{kind} needs torchvision (pip install 'artifact[cifar]')") from e

    cls = {"cifar10": datasets.CIFAR10, "cifar100": datasets.CIFAR100}[kind]
    try:
        tr = cls(root, train=True, download=False)
        te = cls(root, train=False, download=False)
    except RuntimeError as e:
        raise IngestionError(f"{root}: {kind} not found ({e})") from e
    return (tr.data, np.asarray(tr.targets), te.data, np.asarray(te.targets))


def load_dataset(name: str, **synthetic_kw) -> Dataset:
    """``"synthetic"``, ``"cifar10:<root>"``, ``"cifar100:<root>"`` or a ``.npz`` path.

    A ``.npz`` file needs ``x_train``, ``y_train``, ``x_test``, ``y_test`` with
    channels-last images.
    """
    if name == "synthetic":
        x_tr, y_tr, x_te, y_te = synthetic_blobs(**synthetic_kw)
    elif name.split(":", 1)[0] in ("cifar10", "cifar100") and ":" in name:
        kind, root = name.split(":", 1)
        x_tr, y_tr, x_te, y_te = _load_torchvision(kind, root)
    elif name.endswith(".npz"):
        path = Path(name)
        if not path.is_file():
            raise IngestionError(f"{path}: no such dataset file")
        x_tr, y_tr, x_te, y_te = _load_npz(path)
    else:
        raise IngestionError(f"unknown dataset {name!r}")
    xt, xe = _normalize(np.asarray(x_tr), np.asarray(x_te))
    return Dataset(name, xt, torch.as_tensor(np.asarray(y_tr), dtype=torch.int64),
                   xe, torch.as_tensor(np.asarray(y_te), dtype=torch.int64))


def augment(images: torch.Tensor, generator: torch.Generator, padding: int = 2) -> torch.Tensor:
    """Random horizontal flip and zero-padded random crop, per image (channels-last)."""
    b, h, w, _ = images.shape
    flip = torch.rand(b, generator=generator) < 0.5
    out = torch.where(flip[:, None, None, None], images.flip(2), images)
    if padding <= 0:
        return out
    padded = F.pad(out, (0, 0, padding, padding, padding, padding))
    offs = torch.randint(0, 2 * padding + 1, (b, 2), generator=generator)
    return torch.stack([padded[i, dy:dy + h, dx:dx + w] for i, (dy, dx) in enumerate(offs.tolist())])


def iterate_batches(n: int, batch_size: int, generator: torch.Generator):
    """Shuffled index batches; a trailing batch smaller than 2 is dropped."""
    perm = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if len(idx) >= 2:
            yield idx
