"""Embedded datasets, seeded splits and the Gaussian-mixture generator."""

from dataclasses import dataclass, field

import numpy as np

from dance.errors import ValidationError

SIZE_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class EmbeddedDataset:
    """``n x d`` float64 embeddings with integer labels in ``[0, class_count)``.

    ``ids`` carries a stable integer per row (defaults to ``arange(n)``); it
    keys the smoothing noise, so subsets keep the ids of their parent.
    """

    embeddings: np.ndarray
    labels: np.ndarray
    class_count: int
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        z = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        if z.ndim != 2 or z.shape[0] < 1 or z.shape[1] < 1:
            raise ValidationError(f"embeddings must be a non-empty n x d matrix, got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise ValidationError("embeddings contain non-finite values")
        y = np.asarray(self.labels)
        if y.ndim != 1 or y.shape[0] != z.shape[0]:
            raise ValidationError(f"expected {z.shape[0]} labels, got shape {y.shape}")
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(y == np.round(y)):
                raise ValidationError("labels must be integers")
        y = y.astype(np.int64)
        c = int(self.class_count)
        if c < 1:
            raise ValidationError(f"class_count must be positive, got {c}")
        if y.min() < 0 or y.max() >= c:
            raise ValidationError(f"labels must lie in [0, {c}), found range [{y.min()}, {y.max()}]")
        ids = np.arange(z.shape[0], dtype=np.int64) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != y.shape:
            raise ValidationError("ids must have one entry per row")
        z.setflags(write=False)
        y.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "embeddings", z)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "class_count", c)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return EmbeddedDataset(self.embeddings[rows], self.labels[rows], self.class_count, self.ids[rows])

    def one_hot(self):
        y = np.zeros((len(self), self.class_count))
        y[np.arange(len(self)), self.labels] = 1.0
        return y


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple = (0.4, 0.4, 0.2)
    seed: int = 0

    def __post_init__(self):
        r = tuple(float(x) for x in self.ratios)
        if len(r) != 3 or any(x < 0 for x in r):
            raise ValidationError(f"ratios must be three nonnegative numbers, got {self.ratios}")
        if abs(sum(r) - 1.0) > 1e-12:
            raise ValidationError(f"ratios must sum to 1, got {sum(r)!r}")
        object.__setattr__(self, "ratios", r)


def partition_sizes(n, ratios):
    """Floor each share, then hand the leftover rows out left to right.

    A tolerance of 1e-9 rows absorbs binary rounding of ratios such as 0.4.
    """
    sizes = [int(np.floor(r * n + SIZE_TOL)) for r in ratios]
    leftover = n - sum(sizes)
    i = 0
    while leftover > 0:
        sizes[i % len(sizes)] += 1
        leftover -= 1
        i += 1
    return sizes


def partition(n, ratios, seed):
    """Seeded shuffle of ``range(n)`` cut into contiguous slices."""
    sizes = partition_sizes(n, ratios)
    if any(s == 0 for s in sizes):
        raise ValidationError(f"split of n={n} with ratios {tuple(ratios)} leaves an empty part {tuple(sizes)}")
    order = np.random.default_rng(seed).permutation(n)
    cuts = np.cumsum(sizes)[:-1]
    return np.split(order, cuts)


def split_dataset(data, spec=SplitSpec()):
    """Return (support, calibration, test) subsets of ``data``."""
    if len(data) < 3:
        raise ValidationError(f"need at least 3 rows to split, got {len(data)}")
    parts = partition(len(data), spec.ratios, spec.seed)
    return tuple(data.subset(p) for p in parts)


def synth_gaussian_mixture(classes, dim, per_class, noise_sigma, informative_dims=None, seed=0):
    """Balanced Gaussian mixture whose class means lie on the unit sphere of
    the first ``informative_dims`` coordinates (zero elsewhere)."""
    informative_dims = dim if informative_dims is None else informative_dims
    if classes < 2 or dim < 1 or per_class < 1:
        raise ValidationError("need classes >= 2, dim >= 1 and per_class >= 1")
    if not 1 <= informative_dims <= dim:
        raise ValidationError(f"informative_dims must be in [1, {dim}], got {informative_dims}")
    if noise_sigma < 0:
        raise ValidationError("noise_sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    means = np.zeros((classes, dim))
    raw = rng.standard_normal((classes, informative_dims))
    means[:, :informative_dims] = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    labels = np.repeat(np.arange(classes), per_class)
    z = means[labels] + noise_sigma * rng.standard_normal((labels.size, dim))
    return EmbeddedDataset(z, labels, classes)
