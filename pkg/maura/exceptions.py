"""
Exception hierarchy for the maura pipeline.

Library code raises these; only the CLI maps them to exit codes.
"""


class MauraError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(MauraError, ValueError):
    """Invalid input, shape, configuration or index."""


class DatasetFormatError(ValidationError):
    """Corrupt or truncated MAURA1 file."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class ManifestMismatchError(ValidationError):
    """Manifest entries disagree with the files on disk."""


class CheckpointIntegrityError(ValidationError):
    """Checkpoint content hash mismatch or adapter/base mismatch."""


class FrozenParameterError(MauraError):
    """A gradient reached a parameter that is declared frozen."""


class NumericalError(MauraError, ArithmeticError):
    """Non-finite loss or activation during training."""
