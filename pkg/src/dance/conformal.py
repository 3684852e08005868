"""Neighborhood nonconformity scores and split-conformal calibration.

Two scores are computed from the neighbors of a point in the learned metric:

* the rank score: the smallest ``k <= m_knn`` such that a label appears among
  the labels of the ``k`` nearest reference points (``inf`` if it never does);
* the contrastive score: with the nearest neighbor as anchor, each of the
  ``m_clr`` nearest neighbors gets the softmax loss of its kernel distance to
  the anchor; a label scores the smallest loss among neighbors carrying it.

Each score gets its own threshold, with the error budget ``alpha`` shared as
``(1 - lam) * alpha`` for the rank score and ``lam * alpha`` for the
contrastive one. The final set is the intersection of the two label sets.

Batched routines return ``(n, c)`` score matrices over every label, and sets
as ``(n, c)`` boolean membership matrices.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from dance.data import partition
from dance.errors import ValidationError
from dance.kernels import laplace_from_distance
from dance.metrics import ccv, mean_set_size
from dance.neighbors import build_index

SMOOTHED = "smoothed"
DETERMINISTIC = "deterministic"
REUSE = "reuse"
DISJOINT = "disjoint"
QUANTILE_TOL = 1e-10
DEFAULT_LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class ScoreConfig:
    m_knn: int = 100
    m_clr: int = 50
    temperature: float = 0.01
    noise_epsilon: float = 0.1
    smoothing: str = SMOOTHED
    seed: int = 0

    def __post_init__(self):
        if self.m_knn < 1 or self.m_clr < 1:
            raise ValidationError("m_knn and m_clr must be positive")
        if not self.temperature > 0:
            raise ValidationError("temperature must be positive")
        if not 0 < self.noise_epsilon < 1:
            raise ValidationError("noise_epsilon must lie in (0, 1)")
        if self.smoothing not in (SMOOTHED, DETERMINISTIC):
            raise ValidationError(f"smoothing must be {SMOOTHED!r} or {DETERMINISTIC!r}")

    @property
    def smoothed(self):
        return self.smoothing == SMOOTHED

    def clamped(self, available):
        """Copy with neighborhood sizes capped at ``available`` reference rows."""
        return ScoreConfig(min(self.m_knn, available), min(self.m_clr, available),
                           self.temperature, self.noise_epsilon, self.smoothing, self.seed)


@dataclass(frozen=True)
class CalibrationArtifact:
    q_knn: float
    q_clr: float
    alpha: float
    lam: float
    mode: str
    score_config: ScoreConfig = field(default_factory=ScoreConfig)
    n_cal: int = 0

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ValidationError(f"lambda must be in [0, 1], got {self.lam}")
        if self.mode not in (REUSE, DISJOINT):
            raise ValidationError(f"mode must be {REUSE!r} or {DISJOINT!r}")

    @property
    def alpha_knn(self):
        return (1.0 - self.lam) * self.alpha

    @property
    def alpha_clr(self):
        return self.lam * self.alpha


# -- smoothing noise ---------------------------------------------------------

def smoothing_noise(seed, point_ids, class_count, epsilon):
    """Uniform(0, epsilon) noise per (point, label), shape ``(n, c)``.

    Counter-based: point ``i`` reads the first ``c`` draws of the Philox
    stream at counter word 1 = ``i`` under key ``seed``, so the value for a
    (seed, point, label) triple never depends on which other points are
    scored alongside it.
    """
    key = int(seed) & 0xFFFFFFFFFFFFFFFF
    out = np.empty((len(point_ids), class_count))
    for row, pid in enumerate(np.asarray(point_ids, dtype=np.int64)):
        if pid < 0:
            raise ValidationError("point ids must be nonnegative")
        bitgen = np.random.Philox(counter=[0, int(pid), 0, 0], key=key)
        out[row] = np.random.Generator(bitgen).random(class_count)
    return epsilon * out


# -- neighborhoods -----------------------------------------------------------

def _exclusions(n_queries, exclude):
    if exclude is None:
        return None
    return np.asarray(exclude, dtype=np.int64).reshape(n_queries)


def neighborhoods(index, queries, k, exclude=None):
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    return index.query(queries, k, _exclusions(queries.shape[0], exclude))


def knn_rank_matrix(neighbor_labels, class_count):
    """1-based rank of each label's first appearance; ``inf`` when absent."""
    neighbor_labels = np.asarray(neighbor_labels, dtype=np.int64)
    n, m = neighbor_labels.shape
    ranks = np.full((n, class_count), np.inf)
    rows = np.arange(n)
    for r in range(m - 1, -1, -1):
        ranks[rows, neighbor_labels[:, r]] = r + 1
    return ranks


def clr_losses(kernel_distances, temperature):
    """Per-neighbor loss ``-log softmax(-d / tau)`` along the last axis."""
    logits = -np.asarray(kernel_distances, dtype=np.float64) / temperature
    return logsumexp(logits, axis=-1, keepdims=True) - logits


def clr_loss_matrix(index, neighbor_indices, kernel, temperature):
    """Contrastive losses of every support neighbor against the anchor."""
    support = np.asarray(neighbor_indices, dtype=np.int64)
    ref = index.projected_reference
    anchor = ref[support[:, 0]]
    dist = np.sqrt(((ref[support] - anchor[:, None, :]) ** 2).sum(axis=2))
    d_k = 2.0 * (1.0 - laplace_from_distance(dist, kernel.bandwidth, kernel.shape))
    return clr_losses(d_k, temperature)


def min_by_label(values, labels, class_count):
    out = np.full((values.shape[0], class_count), np.inf)
    rows = np.repeat(np.arange(values.shape[0]), values.shape[1])
    np.minimum.at(out, (rows, np.asarray(labels).ravel()), values.ravel())
    return out


def knn_score_matrix(index, neighbor_indices, cfg, point_ids=None):
    ranks = knn_rank_matrix(index.labels[neighbor_indices[:, :cfg.m_knn]], index.class_count)
    if cfg.smoothed:
        if point_ids is None:
            raise ValidationError("smoothed scores need point ids")
        noise = smoothing_noise(cfg.seed, point_ids, index.class_count, cfg.noise_epsilon)
        ranks = np.where(np.isfinite(ranks), ranks + noise, ranks)
    return ranks


def clr_score_matrix(index, neighbor_indices, kernel, cfg):
    support = neighbor_indices[:, :cfg.m_clr]
    losses = clr_loss_matrix(index, support, kernel, cfg.temperature)
    return min_by_label(losses, index.labels[support], index.class_count)


def dance_score_matrices(index, queries, kernel, cfg, point_ids=None, exclude=None):
    """Rank and contrastive score matrices for a batch of queries."""
    k = max(cfg.m_knn, cfg.m_clr)
    idx, _ = neighborhoods(index, queries, k, exclude)
    return knn_score_matrix(index, idx, cfg, point_ids), clr_score_matrix(index, idx, kernel, cfg)


# -- thresholds and sets -----------------------------------------------------

def conformal_quantile(scores, alpha):
    """The ceil((1 - alpha)(n + 1))-th smallest score, or ``inf`` past the end."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    n = scores.size
    if n == 0:
        raise ValidationError("conformal_quantile needs at least one score")
    if not 0 <= alpha <= 1:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    j = math.ceil((1.0 - alpha) * (n + 1) - QUANTILE_TOL)
    if j > n:
        return math.inf
    if j < 1:
        return -math.inf
    return float(np.partition(scores, j - 1)[j - 1])


def threshold_sets(scores, q):
    """Membership ``score <= q``; ``q = inf`` admits every label."""
    scores = np.asarray(scores)
    if math.isinf(q) and q > 0:
        return np.ones(scores.shape, dtype=bool)
    return scores <= q


def knn_sets(scores, q, cfg):
    if not cfg.smoothed and math.isfinite(q) and math.floor(q) > cfg.m_knn:
        return np.ones(np.shape(scores), dtype=bool)
    return threshold_sets(scores, q)


def _label_set(row):
    return frozenset(int(y) for y in np.flatnonzero(row))


def _check_label(y, class_count):
    if not (isinstance(y, (int, np.integer)) and 0 <= y < class_count):
        raise ValidationError(f"label {y!r} is outside [0, {class_count})")


def score_knn(z, y, index, cfg, exclude=None, point_id=0):
    _check_label(y, index.class_count)
    idx, _ = neighborhoods(index, z, cfg.m_knn, None if exclude is None else [exclude])
    return float(knn_score_matrix(index, idx, cfg, [point_id])[0, y])


def set_knn(z, q, index, cfg, point_id=0):
    idx, _ = neighborhoods(index, z, cfg.m_knn)
    scores = knn_score_matrix(index, idx, cfg, [point_id])
    return _label_set(knn_sets(scores, q, cfg)[0])


def score_clr(z, y, index, kernel, cfg, exclude=None):
    _check_label(y, index.class_count)
    idx, _ = neighborhoods(index, z, cfg.m_clr, None if exclude is None else [exclude])
    return float(clr_score_matrix(index, idx, kernel, cfg)[0, y])


def set_clr(z, q, index, kernel, cfg):
    idx, _ = neighborhoods(index, z, cfg.m_clr)
    return _label_set(threshold_sets(clr_score_matrix(index, idx, kernel, cfg), q)[0])


def dance_set(z, art, index, kernel, point_id=0):
    member = dance_membership(np.atleast_2d(z), [point_id], art, index, kernel)
    return _label_set(member["dance"][0])


def dance_membership(queries, point_ids, art, index, kernel):
    """Boolean label sets for the rank branch, contrastive branch and DANCE."""
    knn, clr = dance_score_matrices(index, queries, kernel, art.score_config, point_ids)
    return membership_from_scores(knn, clr, art)


def membership_from_scores(knn_scores, clr_scores, art):
    knn = knn_sets(knn_scores, art.q_knn, art.score_config)
    clr = threshold_sets(clr_scores, art.q_clr)
    return {"knn": knn, "clr": clr, "dance": knn & clr}


# -- calibration -------------------------------------------------------------

def _check_mode(cal, index, mode):
    if mode == REUSE:
        if len(index) != len(cal) or not np.array_equal(index.ids, cal.ids):
            raise ValidationError("reuse mode needs the reference index built from the calibration set")
    elif mode == DISJOINT:
        if index.ids is not None and np.intersect1d(index.ids, cal.ids).size:
            raise ValidationError("disjoint mode needs reference rows distinct from calibration rows")
    else:
        raise ValidationError(f"unknown mode {mode!r}")


def calibration_scores(cal, index, kernel, mode, cfg):
    """Score matrices for the calibration rows (leave-one-out in reuse mode)."""
    _check_mode(cal, index, mode)
    exclude = np.arange(len(cal)) if mode == REUSE else None
    return dance_score_matrices(index, cal.embeddings, kernel, cfg, cal.ids, exclude)


def thresholds(knn_true, clr_true, alpha, lam):
    return (conformal_quantile(knn_true, (1.0 - lam) * alpha),
            conformal_quantile(clr_true, lam * alpha))


def calibrate(cal, reference, kernel, alpha, lam, mode, cfg=ScoreConfig()):
    if len(cal) < 1:
        raise ValidationError("calibration set is empty")
    if not 0 < alpha < 1:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    if not 0 <= lam <= 1:
        raise ValidationError(f"lambda must lie in [0, 1], got {lam}")
    knn, clr = calibration_scores(cal, reference, kernel, mode, cfg)
    rows = np.arange(len(cal))
    q_knn, q_clr = thresholds(knn[rows, cal.labels], clr[rows, cal.labels], alpha, lam)
    return CalibrationArtifact(q_knn, q_clr, float(alpha), float(lam), mode, cfg, len(cal))


# -- mixing weight -----------------------------------------------------------

def _standardize(values):
    values = np.asarray(values, dtype=np.float64)
    std = values.std()
    if std == 0:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def lambda_objective(sizes, ccvs, weights=(0.8, 0.2)):
    return weights[0] * _standardize(sizes) + weights[1] * _standardize(ccvs)


def choose_lambda(grid, sizes, ccvs, weights=(0.8, 0.2)):
    """Grid value minimizing the weighted standardized objective; ties go to the smallest value."""
    grid = np.asarray(grid, dtype=np.float64)
    obj = lambda_objective(sizes, ccvs, weights)
    best = obj.min()
    tied = np.flatnonzero(obj <= best + 1e-12)
    return float(grid[tied].min())


def select_lambda(cal, kernel, feature_matrix, alpha, grid=DEFAULT_LAMBDA_GRID, cfg=ScoreConfig(),
                  weights=(0.8, 0.2), reference=None, seed=0):
    """Pick the error split on an 80/20 partition of ``cal``.

    With ``reference=None`` (reuse), the 80% part is both the neighbor
    reference and the calibration set, scored leave-one-out. Otherwise the
    given disjoint index supplies neighbors and the 80% part only calibrates.
    The 20% part measures mean set size and CCV for each candidate.
    """
    grid = [float(g) for g in grid]
    if not grid or any(not 0 <= g <= 1 for g in grid):
        raise ValidationError("lambda grid must be non-empty with values in [0, 1]")
    if len(grid) == 1:
        return grid[0]
    inner, val = partition(len(cal), (0.8, 0.2), seed)
    inner_cal, inner_val = cal.subset(inner), cal.subset(val)
    if reference is None:
        index, mode = build_index(inner_cal, feature_matrix), REUSE
    else:
        index, mode = reference, DISJOINT
    knn_cal, clr_cal = calibration_scores(inner_cal, index, kernel, mode, cfg)
    rows = np.arange(len(inner_cal))
    knn_true, clr_true = knn_cal[rows, inner_cal.labels], clr_cal[rows, inner_cal.labels]
    knn_val, clr_val = dance_score_matrices(index, inner_val.embeddings, kernel, cfg, inner_val.ids)
    sizes, ccvs = [], []
    for lam in grid:
        q_knn, q_clr = thresholds(knn_true, clr_true, alpha, lam)
        art = CalibrationArtifact(q_knn, q_clr, alpha, lam, mode, cfg, len(inner_cal))
        sets = membership_from_scores(knn_val, clr_val, art)["dance"]
        sizes.append(mean_set_size(sets))
        ccvs.append(ccv(sets, inner_val.labels, alpha, cal.class_count))
    return choose_lambda(grid, sizes, ccvs, weights)
