"""Synthetic tasks, per-class subsetting, binary image ingestion and input noise."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

TASK_KINDS = ("two-moons", "gaussian-blobs", "checkerboard")


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = "dataset"
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    normalized: bool = False
    seed: Optional[int] = None

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        if len(inputs) != len(labels):
            raise ValueError(f"{len(inputs)} inputs but {len(labels)} labels")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.inputs.shape[1:])

    def class_counts(self) -> list:
        return np.bincount(self.labels, minlength=self.n_classes).tolist()

    def channel_stats(self):
        """Per-channel mean/std for (N, C, H, W) inputs, per-feature for vectors."""
        X = self.inputs
        if len(X) == 0:
            c = X.shape[1] if X.ndim > 1 else 1
            return np.zeros(c), np.ones(c)
        axes = (0, 2, 3) if X.ndim == 4 else (0,)
        mean = X.mean(axis=axes)
        std = X.std(axis=axes)
        return mean, np.where(std > 0, std, 1.0)

    def normalize(self, mean=None, std=None) -> "Dataset":
        """Standardize with the given stats (default: this dataset's). Allowed once."""
        if self.normalized:
            raise ValueError(f"dataset {self.name!r} is already normalized")
        if mean is None or std is None:
            mean, std = self.channel_stats()
        mean = np.asarray(mean, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
        shape = (1, -1, 1, 1) if self.inputs.ndim == 4 else (1, -1)
        X = (self.inputs - mean.reshape(shape)) / std.reshape(shape)
        return replace(self, inputs=X, mean=mean, std=std, normalized=True)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return replace(self, inputs=self.inputs[index], labels=self.labels[index])

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "size": len(self),
            "input_shape": list(self.input_shape),
            "classes": list(range(self.n_classes)),
            "counts": self.class_counts(),
            "normalized": self.normalized,
            "mean": None if self.mean is None else np.asarray(self.mean).tolist(),
            "std": None if self.std is None else np.asarray(self.std).tolist(),
            "seed": self.seed,
        }

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")


# synthetic tasks ----------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticTask:
    """Seeded 2-D/D-dimensional classification task, optionally rendered as images.

    With ``image_side`` set, a point ``p`` becomes a ``(D, side, side)`` image
    whose channel ``c`` is ``p[c]`` times a fixed smooth spatial template.
    ``centre_seed`` fixes blob centres independently of the sampling seed, so
    two tasks with the same centre seed share their first classes' centres.
    """

    kind: str = "gaussian-blobs"
    n_classes: int = 4
    noise: float = 0.1
    n_train_per_class: int = 100
    n_test_per_class: int = 50
    dim: int = 2
    image_side: Optional[int] = None
    template_seed: int = 0
    spread: float = 3.0
    centre_seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if self.n_classes < 2:
            raise ValueError("a task needs at least 2 classes")
        if self.n_train_per_class < 1 or self.n_test_per_class < 1:
            raise ValueError("per-class counts must be >= 1")
        if self.kind != "gaussian-blobs" and self.dim != 2:
            raise ValueError(f"{self.kind} is a 2-D task")
        if self.image_side is not None and self.image_side < 2:
            raise ValueError("image_side must be >= 2")

    @property
    def name(self) -> str:
        return f"{self.kind}-{self.n_classes}"

    def input_shape(self) -> tuple:
        if self.image_side is None:
            return (self.dim,)
        return (self.dim, self.image_side, self.image_side)


def _moons(rng, k, n, noise):
    pts, labels = [], []
    for c in range(k):
        t = rng.uniform(0.0, np.pi, size=n)
        if k == 2:
            arc = np.stack([np.cos(t), np.sin(t)], 1) if c == 0 else \
                np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], 1)
        else:
            phi = 2 * np.pi * c / k
            centre = 1.5 * np.array([np.cos(phi), np.sin(phi)])
            arc = centre + np.stack([np.cos(t + phi), np.sin(t + phi)], 1)
        pts.append(arc + noise * rng.standard_normal((n, 2)))
        labels.append(np.full(n, c))
    return np.concatenate(pts), np.concatenate(labels)


def blob_centres(rng, k, dim, spread):
    # row-major draw: the first k rows agree across calls with larger k
    return rng.uniform(-spread, spread, size=(k, dim))


def _blobs(rng, k, n, noise, dim, spread, centre_seed=None):
    crng = rng if centre_seed is None else np.random.default_rng([centre_seed, 0xC])
    centres = blob_centres(crng, k, dim, spread)
    pts = np.concatenate([centres[c] + noise * rng.standard_normal((n, dim)) for c in range(k)])
    return pts, np.repeat(np.arange(k), n)


def _checkerboard(rng, k, n, noise):
    pts = [[] for _ in range(k)]
    while min(len(p) for p in pts) < n:
        xy = rng.uniform(-2.0, 2.0, size=(4 * n * k, 2))
        cls = (np.floor(xy[:, 0]) + np.floor(xy[:, 1])).astype(int) % k
        for c in range(k):
            need = n - len(pts[c])
            if need > 0:
                pts[c].extend(xy[cls == c][:need])
    X = np.concatenate([np.asarray(p) for p in pts])
    return X + noise * rng.standard_normal(X.shape), np.repeat(np.arange(k), n)


def spatial_templates(channels: int, side: int, seed: int) -> np.ndarray:
    """One smooth positive bump per channel, centres drawn from ``seed``."""
    rng = np.random.default_rng([seed, 0x7E])
    grid = (np.arange(side) + 0.5) / side
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    centres = rng.uniform(0.25, 0.75, size=(channels, 2))
    width = 0.3
    t = np.exp(-((yy[None] - centres[:, 0, None, None]) ** 2 + (xx[None] - centres[:, 1, None, None]) ** 2)
               / (2 * width ** 2))
    return t / t.max(axis=(1, 2), keepdims=True)


def render(points: np.ndarray, side: int, template_seed: int) -> np.ndarray:
    templates = spatial_templates(points.shape[1], side, template_seed)
    return points[:, :, None, None] * templates[None]


def generate(task: SyntheticTask, seed: int) -> tuple:
    """Class-balanced, seeded ``(train, test)`` split of ``task``."""
    rng = np.random.default_rng(seed)
    n = task.n_train_per_class + task.n_test_per_class
    if task.kind == "two-moons":
        X, y = _moons(rng, task.n_classes, n, task.noise)
    elif task.kind == "gaussian-blobs":
        X, y = _blobs(rng, task.n_classes, n, task.noise, task.dim, task.spread, task.centre_seed)
    else:
        X, y = _checkerboard(rng, task.n_classes, n, task.noise)
    train_idx, test_idx = [], []
    for c in range(task.n_classes):
        members = np.flatnonzero(y == c)
        members = members[rng.permutation(len(members))]
        train_idx.append(np.sort(members[: task.n_train_per_class]))
        test_idx.append(np.sort(members[task.n_train_per_class:]))
    train_idx = np.concatenate(train_idx)
    test_idx = np.concatenate(test_idx)
    if task.image_side is not None:
        X = render(X, task.image_side, task.template_seed)
    make = lambda idx, split: Dataset(X[idx], y[idx], task.n_classes, f"{task.name}/{split}", seed=seed)
    return make(train_idx, "train"), make(test_idx, "test")


# subsetting and noise --------------------------------------------------------------

def subset_per_class(ds: Dataset, n_per_class: int, seed: int) -> Dataset:
    """Exactly ``n_per_class`` examples of each class, without replacement, in original order."""
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(ds.n_classes):
        members = np.flatnonzero(ds.labels == c)
        if len(members) < n_per_class:
            raise ValueError(f"class {c} has {len(members)} examples, fewer than {n_per_class}")
        keep.append(rng.choice(members, size=n_per_class, replace=False))
    index = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)
    out = ds.subset(index)
    return replace(out, name=f"{ds.name}[{n_per_class}/class]")


def add_input_noise(ds: Dataset, sigma: float, seed: int) -> Dataset:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return ds
    rng = np.random.default_rng(seed)
    return replace(ds, inputs=ds.inputs + sigma * rng.standard_normal(ds.inputs.shape))


# binary image files ----------------------------------------------------------------

@dataclass(frozen=True)
class ImageLayout:
    """Records of ``[label byte | channels*height*width pixel bytes]``, channels first."""

    channels: int
    height: int
    width: int
    n_classes: int

    @property
    def record_size(self) -> int:
        return 1 + self.channels * self.height * self.width


def load_image_binary(path, layout: ImageLayout, name: Optional[str] = None,
                      normalize: bool = True) -> Dataset:
    raw = np.fromfile(path, dtype=np.uint8)
    rec = layout.record_size
    full = len(raw) // rec
    if len(raw) % rec:
        raise ValueError(f"{path}: truncated record at byte offset {full * rec} "
                         f"({len(raw) - full * rec} of {rec} bytes)")
    records = raw.reshape(full, rec)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= layout.n_classes)
    if len(bad):
        i = int(bad[0])
        raise ValueError(f"{path}: label {labels[i]} >= {layout.n_classes} at byte offset {i * rec}")
    pixels = records[:, 1:].astype(np.float64).reshape(full, layout.channels, layout.height, layout.width)
    ds = Dataset(pixels / 255.0, labels, layout.n_classes, name or Path(path).name)
    if normalize and len(ds):
        return ds.normalize()
    return ds
