"""Exception hierarchy.

Every error carries a short machine-readable ``code`` (the class name by
default). The CLI prints it as a prefix so callers can parse failures.
"""
from __future__ import annotations


class PipelineError(Exception):
    """Base class for all errors raised by radarflood."""

    @property
    def code(self) -> str:
        return type(self).__name__


# grid_io
class BadMagic(PipelineError, ValueError):
    pass


class TruncatedPayload(PipelineError, ValueError):
    pass


class NonFiniteNegative(PipelineError, ValueError):
    """A finite precipitation value below zero."""


class InvariantViolation(PipelineError, ValueError):
    pass


class UnsortedRows(PipelineError, ValueError):
    pass


class MalformedRow(PipelineError, ValueError):
    pass


class InconsistentStep(PipelineError, ValueError):
    pass


# preprocess / tensor shapes
class OutOfBounds(PipelineError, IndexError):
    pass


class ShapeMismatch(PipelineError, ValueError):
    pass


class IrregularSpacing(PipelineError, ValueError):
    pass


class DegenerateInput(PipelineError, ValueError):
    pass


class TooFewSamples(PipelineError, ValueError):
    pass


class MisalignedSeries(PipelineError, ValueError):
    pass


# tensor core / model
class GraphCycle(PipelineError, RuntimeError):
    pass


class NonFiniteAnchor(PipelineError, ValueError):
    pass


class EmptyDataset(PipelineError, ValueError):
    pass


class DivergedLoss(PipelineError, FloatingPointError):
    pass


class MissingCheckpoint(PipelineError, FileNotFoundError):
    pass


class InsufficientHistory(PipelineError, ValueError):
    pass


# metrics
class LengthMismatch(PipelineError, ValueError):
    pass


class DegenerateObserved(PipelineError, ValueError):
    """Observed series has zero variance, so NSE/IoA are undefined."""


# synth / cli
class TooShort(PipelineError, ValueError):
    pass


class IoError(PipelineError, OSError):
    pass
