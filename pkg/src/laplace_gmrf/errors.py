"""Exception types raised across the package."""


class LaplaceGMRFError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(LaplaceGMRFError, ValueError):
    pass


class NotSymmetric(LaplaceGMRFError, ValueError):
    pass


class NotPositiveDefinite(LaplaceGMRFError, ArithmeticError):
    """A Cholesky pivot fell below the positive-definiteness tolerance."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class SingularConstraint(LaplaceGMRFError, ArithmeticError):
    pass


# latent models


class SizeTooSmall(LaplaceGMRFError, ValueError):
    pass


class AsymmetricGraph(LaplaceGMRFError, ValueError):
    pass


class SelfLoop(LaplaceGMRFError, ValueError):
    pass


class InvalidCorrelation(LaplaceGMRFError, ValueError):
    pass


class UnknownHyperSlot(LaplaceGMRFError, KeyError):
    pass


# observation models


class InvalidCount(LaplaceGMRFError, ValueError):
    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


# inference


class NewtonDiverged(LaplaceGMRFError, ArithmeticError):
    pass


class OptimDiverged(LaplaceGMRFError, ArithmeticError):
    pass


class GridExplosion(LaplaceGMRFError, RuntimeError):
    pass


class GuardExceeded(LaplaceGMRFError, ValueError):
    pass


class NonPDHessian(UserWarning):
    """The finite-difference Hessian at the mode was not positive definite."""


# oracle


class GridTooLarge(LaplaceGMRFError, ValueError):
    pass


class BoxTooNarrow(LaplaceGMRFError, ValueError):
    pass


class DomainError(LaplaceGMRFError, ValueError):
    pass


# input documents and files


class SchemaError(LaplaceGMRFError, ValueError):
    """Invalid model document or data file.

    ``path`` locates the offending field, e.g. ``components[2].kind``.
    """

    def __init__(self, message, path=None):
        if path:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path


class UnknownModelKind(SchemaError):
    pass


class MissingGraphFile(SchemaError):
    pass


class UnsupportedFamily(SchemaError):
    pass


class CycleInCopy(SchemaError):
    pass


class BadNumeric(SchemaError):
    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(message, path=", ".join(where) or None)
        self.row = row
        self.column = column


class ResponseOverlap(SchemaError):
    pass
