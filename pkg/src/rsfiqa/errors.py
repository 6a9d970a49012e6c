"""Exception hierarchy.

Every domain error carries a ``category`` (its class name) so the CLI can
print a single machine-parsable line on failure.
"""

from __future__ import annotations


class RsfiqaError(Exception):
    """Base class for all domain errors."""

    @property
    def category(self) -> str:
        return type(self).__name__


class ShapeMismatch(RsfiqaError, ValueError):
    pass


class InvalidAxis(RsfiqaError, ValueError):
    pass


class InvalidTarget(RsfiqaError, ValueError):
    pass


class TargetMismatch(RsfiqaError, ValueError):
    pass


class NonScalarLoss(RsfiqaError, ValueError):
    pass


class EmptyInput(RsfiqaError, ValueError):
    pass


class IndivisibleInput(RsfiqaError, ValueError):
    pass


class InvalidL(RsfiqaError, ValueError):
    pass


class InvalidMask(RsfiqaError, ValueError):
    pass


class EmptyRegion(RsfiqaError, ValueError):
    pass


class EmptyText(RsfiqaError, ValueError):
    pass


class IoError(RsfiqaError, OSError):
    pass


class CorruptMaskFile(RsfiqaError, ValueError):
    pass


class UnparseableResponse(RsfiqaError, ValueError):
    pass


class TransportError(RsfiqaError, ConnectionError):
    pass


class AuthError(RsfiqaError, PermissionError):
    pass


class LengthMismatch(RsfiqaError, ValueError):
    pass


class EmptyBatch(RsfiqaError, ValueError):
    pass


class DegenerateRange(RsfiqaError, ValueError):
    pass


class DegenerateVariance(RsfiqaError, ValueError):
    pass


class IdMismatch(RsfiqaError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class MalformedCsv(RsfiqaError, ValueError):
    pass


class MissingImage(RsfiqaError, FileNotFoundError):
    pass


class TooFewSamples(RsfiqaError, ValueError):
    pass


class NonFiniteLoss(RsfiqaError, FloatingPointError):
    pass


class InvalidGrid(RsfiqaError, ValueError):
    pass


class ConfigError(RsfiqaError, ValueError):
    pass


class CorruptCheckpoint(RsfiqaError, ValueError):
    pass
