"""Typed errors raised by the geocausal package.

The CLI maps these onto exit codes: validation problems exit 2, numeric
failures exit 3, I/O problems exit 4.
"""


class GeocausalError(Exception):
    """Base class for all package errors."""


class ValidationError(GeocausalError, ValueError):
    """Bad inputs: malformed files, out-of-range values, bad config keys."""


class SchemaError(ValidationError):
    """A required column is missing or a header is malformed."""


class ParseError(ValidationError):
    """A cell failed to parse; carries the offending row index."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class DegenerateFeatureError(ValidationError):
    """A feature column has zero scale and cannot be standardized."""


class NumericError(GeocausalError, RuntimeError):
    """Numeric failure: non-finite values, factorization breakdown."""


class ConditioningError(NumericError):
    """Cholesky failed even after jitter escalation."""

    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class FitFailedError(NumericError):
    """The fit diverged; carries the last finite model state if any."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class UndefinedMetricError(ValidationError):
    """A ranking metric is undefined (single-class labels)."""


class CheckpointError(GeocausalError, IOError):
    """Checkpoint file is unreadable or structurally invalid."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version does not match this build."""

    def __init__(self, found, expected):
        super().__init__(
            f"checkpoint format version {found} does not match expected {expected}"
        )
        self.found = found
        self.expected = expected
