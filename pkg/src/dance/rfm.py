"""Kernel ridge regression with a learned Mahalanobis metric (RFM).

The feature matrix is refit as the average gradient outer product (AGOP) of
the current predictor, renormalized to trace ``d`` so that the bandwidth keeps
the same meaning from one iteration to the next.
"""

import logging
from dataclasses import dataclass

import numpy as np

from dance._parallel import chunked_rows
from dance.errors import DimensionError, SingularSystemError, ValidationError
from dance.kernels import (
    KernelParams,
    kernel_matrix,
    laplace_from_distance,
    projected_distances,
    psd_sqrt,
    solve_regularized,
)

log = logging.getLogger(__name__)

GRADIENT_MIN_DISTANCE = 1e-12
AGOP_MIN_DISTANCE = 1e-6


@dataclass(frozen=True, eq=False)
class KrrModel:
    reference_embeddings: np.ndarray
    coefficients: np.ndarray
    kernel: KernelParams
    ridge: float

    def __post_init__(self):
        z = np.asarray(self.reference_embeddings, dtype=np.float64)
        beta = np.asarray(self.coefficients, dtype=np.float64)
        if beta.ndim != 2 or beta.shape[0] != z.shape[0]:
            raise DimensionError(f"coefficients {beta.shape} do not match {z.shape[0]} reference rows")
        if z.shape[1] != self.kernel.dim:
            raise DimensionError(f"kernel is {self.kernel.dim}-dimensional, embeddings are {z.shape[1]}")
        object.__setattr__(self, "reference_embeddings", z)
        object.__setattr__(self, "coefficients", beta)

    @property
    def dim(self):
        return self.reference_embeddings.shape[1]

    @property
    def outputs(self):
        return self.coefficients.shape[1]


@dataclass(frozen=True)
class RfmConfig:
    iterations: int = 5
    tuning_budget: int = 25
    bandwidth_range: tuple = (0.1, 100.0)
    shape_range: tuple = (0.5, 2.0)
    ridge_range: tuple = (1e-6, 1e-1)
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValidationError("iterations must be nonnegative")
        if self.tuning_budget < 1:
            raise ValidationError("tuning_budget must be at least 1")
        for name in ("bandwidth_range", "shape_range", "ridge_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValidationError(f"{name} must satisfy 0 < low <= high, got {(lo, hi)}")


@dataclass(frozen=True, eq=False)
class RfmModel:
    krr: KrrModel
    learned_feature_matrix: np.ndarray
    validation_accuracy: float
    selected_iteration: int

    @property
    def kernel(self):
        return self.krr.kernel

    def predict(self, queries):
        return krr_predict(self.krr, queries)


def krr_fit(z, y, kernel, ridge):
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValidationError("need at least one training row")
    if y.ndim != 2 or y.shape[0] != z.shape[0]:
        raise DimensionError(f"targets {y.shape} do not match {z.shape[0]} rows")
    k = kernel_matrix(z, z, kernel)
    beta = solve_regularized(k, y, ridge)
    return KrrModel(z, beta, kernel, float(ridge))


def krr_predict(model, queries):
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if q.shape[1] != model.dim:
        raise DimensionError(f"queries have d={q.shape[1]}, model expects {model.dim}")
    return kernel_matrix(q, model.reference_embeddings, model.kernel) @ model.coefficients


def predictor_gradients(model, queries, min_distance=GRADIENT_MIN_DISTANCE):
    """Input gradients of the predictor at each query row, shape ``(m, d, c)``.

    Reference points closer than ``min_distance`` (in M-norm) to a query
    contribute nothing: the kernel is not differentiable there.
    """
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    if q.shape[1] != model.dim:
        raise DimensionError(f"queries have d={q.shape[1]}, model expects {model.dim}")
    x = model.reference_embeddings
    beta = model.coefficients
    m = model.kernel.feature_matrix
    bw, xi = model.kernel.bandwidth, model.kernel.shape
    root = psd_sqrt(m)
    xr, qr = x @ root, q @ root
    n, d = x.shape
    c = beta.shape[1]
    outer = (x[:, :, None] * beta[:, None, :]).reshape(n, d * c)

    def block(s, e):
        r = projected_distances(qr[s:e], xr)
        keep = r >= min_distance
        safe = np.where(keep, r, 1.0)
        k = laplace_from_distance(safe, bw, xi)
        coef = np.where(keep, -k / (xi * bw) * np.power(safe / bw, 1.0 / xi - 1.0) / safe, 0.0)
        weighted = coef @ beta
        cross = (coef @ outer).reshape(e - s, d, c)
        inner = q[s:e, :, None] * weighted[:, None, :] - cross
        return np.einsum("ab,mbc->mac", m, inner)

    grads = chunked_rows(block, q.shape[0])
    if not np.all(np.isfinite(grads)):
        raise ValidationError("non-finite predictor gradient; check bandwidth and shape")
    return grads


def predictor_gradient(model, z, min_distance=GRADIENT_MIN_DISTANCE):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise DimensionError("predictor_gradient takes a single embedding vector")
    return predictor_gradients(model, z[None, :], min_distance)[0]


def agop(model, z, min_distance=AGOP_MIN_DISTANCE):
    """Average gradient outer product over the rows of ``z``."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValidationError("agop needs at least one sample")
    grads = predictor_gradients(model, z, min_distance)
    out = np.einsum("idc,iec->de", grads, grads) / z.shape[0]
    return 0.5 * (out + out.T)


def top1_accuracy(logits, labels):
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def rfm_train(train, val, kernel_init, config=RfmConfig(), ridge=1e-3):
    """Alternate KRR fits and AGOP updates; keep the best iteration on ``val``.

    Iteration 0 is the plain KRR with ``kernel_init``'s matrix, so the result
    never scores below that baseline on the validation set. Ties go to the
    later iteration: at equal accuracy the more adapted metric is kept.
    """
    if len(train) < 1 or len(val) < 1:
        raise ValidationError("train and val must be non-empty")
    if train.dim != val.dim or train.class_count != val.class_count:
        raise DimensionError("train and val must share embedding dimension and class count")
    d = train.dim
    y = train.one_hot()
    m = kernel_init.feature_matrix
    best = None
    for t in range(config.iterations + 1):
        kernel = kernel_init.with_matrix(m)
        model = krr_fit(train.embeddings, y, kernel, ridge)
        acc = top1_accuracy(krr_predict(model, val.embeddings), val.labels)
        log.debug("rfm iteration %d: val acc %.4f", t, acc)
        if best is None or acc >= best[2]:
            best = (model, t, acc)
        if t == config.iterations:
            break
        g = agop(model, train.embeddings)
        tr = np.trace(g)
        if not np.isfinite(tr) or tr <= 0:
            log.debug("AGOP vanished at iteration %d; stopping early", t)
            break
        m = g * (d / tr)
    model, t, acc = best
    return RfmModel(model, model.kernel.feature_matrix, acc, t)


def _log_uniform(rng, lo, hi):
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def tune_hyperparameters(train, val, config=RfmConfig()):
    """Seeded random search over bandwidth, shape and ridge.

    Candidates are drawn one after another from a single stream, so a larger
    budget always sees the smaller budget's candidates first. Ties keep the
    earliest candidate.
    """
    if len(train) < 1 or len(val) < 1:
        raise ValidationError("train and val must be non-empty")
    rng = np.random.default_rng(config.seed)
    best = None
    for i in range(config.tuning_budget):
        bandwidth = _log_uniform(rng, *config.bandwidth_range)
        shape = float(rng.uniform(*config.shape_range))
        ridge = _log_uniform(rng, *config.ridge_range)
        init = KernelParams.identity(train.dim, bandwidth, shape)
        try:
            model = rfm_train(train, val, init, config, ridge)
        except (SingularSystemError, ValidationError) as exc:
            log.warning("candidate %d (L=%.3g, xi=%.3g, ridge=%.3g) failed: %s", i, bandwidth, shape, ridge, exc)
            continue
        log.debug("candidate %d: L=%.4g xi=%.4g ridge=%.3g acc=%.4f", i, bandwidth, shape, ridge, model.validation_accuracy)
        if best is None or model.validation_accuracy > best.validation_accuracy:
            best = model
    if best is None:
        raise SingularSystemError("every tuning candidate failed")
    return best.kernel, best.krr.ridge, best
