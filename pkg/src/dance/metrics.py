"""Coverage, set size and class-conditional coverage violation (CCV).

Prediction sets may be given either as a sequence of label collections or
as an ``(n, c)`` boolean membership matrix.
"""

import numpy as np

from dance.errors import ValidationError


def _is_membership(sets):
    return isinstance(sets, np.ndarray) and sets.dtype == bool and sets.ndim == 2


def _hits(sets, labels):
    labels = np.asarray(labels, dtype=np.int64)
    n = len(sets)
    if n != labels.shape[0]:
        raise ValidationError(f"{n} sets but {labels.shape[0]} labels")
    if n == 0:
        raise ValidationError("need at least one prediction set")
    if _is_membership(sets):
        valid = (labels >= 0) & (labels < sets.shape[1])
        hits = np.zeros(n, dtype=bool)
        hits[valid] = sets[np.flatnonzero(valid), labels[valid]]
        return hits
    return np.array([int(y) in s for s, y in zip(sets, labels)], dtype=bool)


def coverage(sets, labels):
    return float(np.mean(_hits(sets, labels)))


def set_sizes(sets):
    if _is_membership(sets):
        return sets.sum(axis=1)
    return np.array([len(s) for s in sets])


def mean_set_size(sets):
    if len(sets) == 0:
        raise ValidationError("need at least one prediction set")
    return float(np.mean(set_sizes(sets)))


def per_class_coverage(sets, labels, class_count):
    """Coverage restricted to each class that has at least one instance."""
    hits = _hits(sets, labels)
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=class_count)
    covered = np.bincount(labels, weights=hits.astype(np.float64), minlength=class_count)
    return {int(y): float(covered[y] / counts[y]) for y in range(class_count) if counts[y] > 0}


def ccv(sets, labels, alpha, class_count):
    """100 x mean |class coverage - (1 - alpha)|, over classes present in ``labels``."""
    per_class = per_class_coverage(sets, labels, class_count)
    if not per_class:
        raise ValidationError("no class has any instance")
    gaps = np.array([abs(v - (1.0 - alpha)) for v in per_class.values()])
    return float(100.0 * gaps.mean())
