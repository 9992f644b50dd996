"""Exception types shared across the toolkit.

Every failure the library raises on purpose derives from :class:`FppError`,
so callers (and the CLI) can distinguish domain failures from bugs.  Each
subclass carries a short machine-readable ``category`` used by the CLI for
single-line error reporting.
"""

from __future__ import annotations


class FppError(Exception):
    """Base class for all toolkit errors."""

    category = "error"


class ParameterError(FppError, ValueError):
    """An operation was called with out-of-contract parameters."""

    category = "parameter"


class CalibrationError(FppError):
    """Calibration file missing, malformed, or geometrically invalid."""

    category = "calibration"


class StackFormatError(FppError):
    """Image stack directory or manifest violates the expected layout."""

    category = "stack-format"


class LabelParseError(FppError):
    """Flat-text label line failed to parse.

    Attributes:
        line_no: 1-based line number of the offending line, or None.
    """

    category = "label-parse"

    def __init__(self, message: str, line_no: int | None = None):
        super().__init__(message if line_no is None else f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyMaskError(FppError):
    """A mask operation received an all-background mask."""

    category = "empty-mask"


class EmptyRegionError(FppError):
    """Metric evaluation region contains no usable pixels."""

    category = "empty-region"


class ConvergenceError(FppError):
    """Iterative solver exhausted its iteration budget.

    Attributes:
        residual: final residual when iteration stopped.
    """

    category = "convergence"

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class CompletionBackendError(FppError):
    """External completion backend unreachable or timed out."""

    category = "completion-backend"


class ProtocolError(FppError):
    """External completion backend returned a malformed response."""

    category = "protocol"


class OutputExistsError(FppError):
    """Refusing to write into an existing non-empty output location."""

    category = "output-exists"


class PipelineError(FppError):
    """A pipeline stage failed; message names the stage, cause is chained."""

    category = "pipeline"
