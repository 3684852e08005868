"""Dense kernel and linear-algebra primitives.

Everything here works in float64. The generalized Laplace kernel is

    K_M(z1, z2) = exp(-(||z1 - z2||_M / L) ** (1 / xi))

with ``||v||_M = sqrt(v M v^T)`` for a symmetric PSD feature matrix ``M``.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from dance._parallel import chunked_rows
from dance.errors import DimensionError, SingularSystemError, ValidationError

SYMMETRY_RTOL = 1e-10
PSD_RTOL = 1e-8
QUADFORM_FLOOR = -1e-12


def as_feature_matrix(m, dim=None):
    """Validate ``m`` as a symmetric PSD matrix and return it as float64."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"feature matrix must be square, got shape {m.shape}")
    if dim is not None and m.shape[0] != dim:
        raise DimensionError(f"feature matrix is {m.shape[0]}x{m.shape[0]}, data has d={dim}")
    if not np.all(np.isfinite(m)):
        raise ValidationError("feature matrix has non-finite entries")
    scale = max(np.abs(m).max(), 1.0)
    if np.abs(m - m.T).max() > SYMMETRY_RTOL * scale:
        raise ValidationError("feature matrix is not symmetric")
    return m


@dataclass(frozen=True, eq=False)
class KernelParams:
    """Feature matrix ``M``, bandwidth ``L`` and shape ``xi`` of the kernel."""

    feature_matrix: np.ndarray
    bandwidth: float
    shape: float

    def __post_init__(self):
        object.__setattr__(self, "feature_matrix", as_feature_matrix(self.feature_matrix))
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ValidationError(f"bandwidth must be positive, got {self.bandwidth}")
        if not (np.isfinite(self.shape) and self.shape > 0):
            raise ValidationError(f"shape must be positive, got {self.shape}")
        object.__setattr__(self, "bandwidth", float(self.bandwidth))
        object.__setattr__(self, "shape", float(self.shape))

    @property
    def dim(self):
        return self.feature_matrix.shape[0]

    @classmethod
    def identity(cls, dim, bandwidth=1.0, shape=1.0):
        return cls(np.eye(dim), bandwidth, shape)

    def with_matrix(self, m):
        return KernelParams(m, self.bandwidth, self.shape)


def _vector(z, dim=None):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise DimensionError(f"expected a non-empty 1-D vector, got shape {z.shape}")
    if dim is not None and z.size != dim:
        raise DimensionError(f"vector has length {z.size}, expected {dim}")
    return z


def _rows(a, dim=None):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise DimensionError(f"expected a 2-D row set, got shape {a.shape}")
    if dim is not None and a.shape[1] != dim:
        raise DimensionError(f"rows have dimension {a.shape[1]}, expected {dim}")
    return a


def mahalanobis_distance(z1, z2, m):
    m = np.asarray(m, dtype=np.float64)
    z1 = _vector(z1)
    z2 = _vector(z2, z1.size)
    if m.shape != (z1.size, z1.size):
        raise DimensionError(f"feature matrix shape {m.shape} does not match d={z1.size}")
    diff = z1 - z2
    quad = float(diff @ m @ diff)
    if quad < QUADFORM_FLOOR:
        raise ValidationError(f"negative quadratic form {quad:g}; feature matrix is not PSD")
    return float(np.sqrt(max(quad, 0.0)))


def laplace_from_distance(dist, bandwidth, shape):
    """Kernel value as a function of the (already computed) M-distance."""
    return np.exp(-np.power(np.asarray(dist, dtype=np.float64) / bandwidth, 1.0 / shape))


def kernel_eval(z1, z2, params):
    dist = mahalanobis_distance(z1, z2, params.feature_matrix)
    value = float(laplace_from_distance(dist, params.bandwidth, params.shape))
    if not np.isfinite(value):
        raise ValidationError("kernel value is not finite")
    return value


def psd_sqrt(m):
    """Symmetric square root of a PSD matrix via eigendecomposition.

    Eigenvalues in ``[-1e-8 * lambda_max, 0)`` are treated as rounding noise
    and clamped to zero; anything more negative is rejected.
    """
    m = as_feature_matrix(m)
    sym = 0.5 * (m + m.T)
    try:
        w, v = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"eigendecomposition failed: {exc}") from exc
    top = max(w.max(initial=0.0), 0.0)
    if w.size and w.min() < -PSD_RTOL * max(top, np.finfo(float).tiny):
        raise ValidationError(f"matrix is not PSD (smallest eigenvalue {w.min():g})")
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return 0.5 * (root + root.T)


def projected_distances(a, b):
    """Pairwise Euclidean distances between two row sets, row-chunked."""
    a = _rows(a)
    b = _rows(b, a.shape[1])
    return chunked_rows(lambda s, e: cdist(a[s:e], b, metric="euclidean"), a.shape[0])


def kernel_matrix(a, b, params):
    a = _rows(a, params.dim)
    b = _rows(b, params.dim)
    root = psd_sqrt(params.feature_matrix)
    dist = projected_distances(a @ root, b @ root)
    return laplace_from_distance(dist, params.bandwidth, params.shape)


def solve_regularized(k, y, ridge, max_doublings=3):
    """Solve ``(k + ridge * I) beta = y`` by Cholesky, with diagonal jitter on failure."""
    k = np.asarray(k, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    vector_rhs = y.ndim == 1
    if vector_rhs:
        y = y[:, None]
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise DimensionError(f"system matrix must be square, got {k.shape}")
    if y.shape[0] != k.shape[0]:
        raise DimensionError(f"right-hand side has {y.shape[0]} rows, system has {k.shape[0]}")
    if ridge < 0:
        raise ValidationError(f"ridge must be nonnegative, got {ridge}")
    if np.abs(k - k.T).max(initial=0.0) > SYMMETRY_RTOL * max(np.abs(k).max(initial=0.0), 1.0):
        raise ValidationError("system matrix is not symmetric")

    n = k.shape[0]
    a = k + ridge * np.eye(n)
    base_jitter = 1e-8 * np.trace(k) / n
    jitters = [0.0] + [base_jitter * 2.0**t for t in range(max_doublings + 1)]
    for jitter in jitters:
        try:
            factor = scipy.linalg.cho_factor(a + jitter * np.eye(n), lower=True, check_finite=True)
        except np.linalg.LinAlgError:
            continue
        beta = scipy.linalg.cho_solve(factor, y)
        if np.all(np.isfinite(beta)):
            return beta[:, 0] if vector_rhs else beta
    raise SingularSystemError(f"system of size {n} is singular after jitter {jitters[-1]:g}")
