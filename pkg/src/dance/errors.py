"""Exception hierarchy shared across the package."""

import numpy as np


class DanceError(Exception):
    """Base class for all package errors."""


class ValidationError(DanceError, ValueError):
    """An argument or data value violates a documented precondition."""


class DimensionError(ValidationError):
    """Array shapes do not agree."""


class SingularSystemError(DanceError, np.linalg.LinAlgError):
    """A regularized linear system could not be factorized even after jitter."""


class FormatError(DanceError, ValueError):
    """A file on disk does not follow the expected binary or text layout."""
