"""
Exception hierarchy shared by every lab module

Each error carries the process exit code the CLI reports for it.
"""

from typing import Optional


class LabError(Exception):
    """Base class for all lab errors"""

    exit_code = 1


class ConfigError(LabError):
    """Invalid or infeasible configuration"""

    exit_code = 2


class DataError(LabError):
    """Missing, inconsistent or insufficient data"""

    exit_code = 3


class ParseError(DataError):
    """A persisted file could not be parsed"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class IntegrityError(DataError):
    """Stored bytes do not match their recorded length or digest"""


class ProvenanceError(DataError):
    """Results computed with different frozen encoders were mixed"""


class DependencyError(DataError):
    """A pipeline stage needs an artifact an earlier stage did not produce"""


class TrainingError(LabError):
    """Training diverged"""

    exit_code = 4

    def __init__(self, message: str, checkpoint_path: Optional[str] = None):
        if checkpoint_path:
            message = f"{message} (last good checkpoint: {checkpoint_path})"
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class ShapeError(LabError):
    """Array dimensions do not chain"""


class NumericError(LabError):
    """A non-finite value appeared"""

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class RangeError(LabError):
    """An argument is outside its allowed range"""


class DomainError(LabError):
    """Input is not a member of the function's domain"""


class ContentError(LabError):
    """Text content is empty or misses required facts"""


class UndefinedDensityError(LabError):
    """A trajectory density was requested for a deterministic sampler"""


class RewriterTransportError(LabError):
    """The caption rewriter could not be reached; safe to retry"""

    retriable = True


class PipelineError(LabError):
    """A pipeline stage failed"""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
