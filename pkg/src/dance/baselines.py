"""Comparison scores: Deep k-NN, APS, RAPS and NCP-weighted RAPS.

All follow the larger-is-less-conforming convention. APS is the
deterministic variant (no randomized tie splitting).
"""

import math

import numpy as np
from scipy.special import softmax

from dance.conformal import QUANTILE_TOL, neighborhoods, threshold_sets
from dance.errors import ValidationError
from dance.neighbors import nearest_from_projected

PROB_TOL = 1e-9


def logits_to_probabilities(logits):
    return softmax(np.atleast_2d(np.asarray(logits, dtype=np.float64)), axis=1)


# -- Deep k-NN ---------------------------------------------------------------

def deep_knn_matrix(neighbor_labels, class_count):
    """Fraction of the given neighbors whose label differs from each candidate."""
    neighbor_labels = np.asarray(neighbor_labels, dtype=np.int64)
    n, k = neighbor_labels.shape
    counts = np.zeros((n, class_count))
    np.add.at(counts, (np.repeat(np.arange(n), k), neighbor_labels.ravel()), 1.0)
    return 1.0 - counts / k


def deep_knn_score_matrix(index, queries, k=75, exclude=None):
    idx, _ = neighborhoods(index, queries, k, exclude)
    return deep_knn_matrix(index.labels[idx], index.class_count)


def score_deep_knn(z, y, index, k=75, exclude=None):
    if not 0 <= y < index.class_count:
        raise ValidationError(f"label {y} is outside [0, {index.class_count})")
    return float(deep_knn_score_matrix(index, z, k, None if exclude is None else [exclude])[0, y])


# -- APS / RAPS --------------------------------------------------------------

def _check_probabilities(probs):
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > PROB_TOL):
        raise ValidationError("probabilities must be nonnegative and sum to 1")
    return probs


def _descending(probs):
    # stable sort on -p: equal probabilities keep ascending label order
    order = np.argsort(-probs, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(probs.shape[1])[None, :].repeat(probs.shape[0], 0), axis=1)
    return order, ranks


def aps_matrix(probs):
    """Mass of all labels ranked at or above each label, shape ``(n, c)``."""
    probs = _check_probabilities(probs)
    order, ranks = _descending(probs)
    cumulative = np.cumsum(np.take_along_axis(probs, order, axis=1), axis=1)
    return np.take_along_axis(cumulative, ranks, axis=1)


def raps_matrix(probs, lambda_raps=0.001, k_raps=1):
    probs = _check_probabilities(probs)
    _, ranks = _descending(probs)
    return aps_matrix(probs) + lambda_raps * np.maximum(0, ranks + 1 - k_raps)


def score_aps(probabilities, y):
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if not 0 <= y < probabilities.shape[-1]:
        raise ValidationError(f"label {y} is outside [0, {probabilities.shape[-1]})")
    return float(aps_matrix(probabilities)[0, y])


def score_raps(probabilities, y, lambda_raps=0.001, k_raps=1):
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if not 0 <= y < probabilities.shape[-1]:
        raise ValidationError(f"label {y} is outside [0, {probabilities.shape[-1]})")
    return float(raps_matrix(probabilities, lambda_raps, k_raps)[0, y])


# -- NCP ---------------------------------------------------------------------

def ncp_weighted_quantile(scores, similarities, alpha):
    """Localized quantile with the test point's own unit weight kept at +inf.

    Weights are ``K_i / (1 + sum K)``; returns the smallest calibration score
    whose cumulative weight reaches ``1 - alpha``, or ``inf`` if none does.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    sims = np.asarray(similarities, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValidationError("ncp_weighted_quantile needs at least one score")
    if sims.shape != scores.shape or np.any(sims < 0):
        raise ValidationError("need one nonnegative similarity per score")
    order = np.argsort(scores, kind="stable")
    mass = np.cumsum(sims[order]) / (1.0 + sims.sum())
    reached = np.flatnonzero(mass >= 1.0 - alpha - QUANTILE_TOL)
    if reached.size == 0:
        return math.inf
    return float(scores[order[reached[0]]])


def ncp_default_bandwidth(cal_index, k=50):
    """Median distance from a calibration point to its ``k``-th nearest other
    calibration point, so that most localizer weights sit near ``exp(-1)``."""
    k = min(k, len(cal_index) - 1)
    ref = cal_index.projected_reference
    _, dist = nearest_from_projected(ref, ref, k, exclude=np.arange(len(cal_index)))
    scale = float(np.median(dist[:, -1]))
    return scale if scale > 0 else 1.0


def ncp_thresholds(cal_index, cal_scores, queries, bandwidth, alpha, k=50):
    """Per-query NCP thresholds from the ``k`` nearest calibration points,
    weighted by ``exp(-distance / bandwidth)`` in the projected space."""
    idx, dist = neighborhoods(cal_index, queries, k)
    sims = np.exp(-dist / bandwidth)
    cal_scores = np.asarray(cal_scores, dtype=np.float64)
    return np.array([ncp_weighted_quantile(cal_scores[i], s, alpha) for i, s in zip(idx, sims)])


def ncp_sets(test_scores, query_thresholds):
    return np.vstack([threshold_sets(row, q) for row, q in zip(test_scores, query_thresholds)])
