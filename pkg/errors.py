#!/usr/bin/env python3
"""
Exception hierarchy for the covmode imputation engine

Library code raises these; only app.main() turns them into exit codes.
"""

from config import EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO


class CovmodeError(Exception):
    """Base class for every engine error"""
    exit_code = 1


# ==================== VALIDATION ====================

class ValidationError(CovmodeError, ValueError):
    exit_code = EXIT_VALIDATION


class ConfigError(ValidationError):
    pass


class BlockValidationError(ValidationError):
    pass


class InvalidParameter(ValidationError):
    pass


class InvalidGamma(InvalidParameter):
    pass


class InvalidTau(InvalidParameter):
    pass


class InvalidJitter(InvalidParameter):
    pass


class InvalidC(InvalidParameter):
    pass


class NonPositiveTrace(ValidationError):
    pass


class DegreesOfFreedomTooSmall(ValidationError):
    pass


class TooFewRows(ValidationError):
    pass


class InsufficientObserved(ValidationError):
    pass


class AllMissingColumn(ValidationError):
    pass


class TooFewCompleteRows(ValidationError):
    pass


class MisalignedMask(ValidationError):
    pass


# ==================== NUMERICAL ====================

class NumericalError(CovmodeError, ArithmeticError):
    exit_code = EXIT_NUMERICAL


class NotPositiveDefinite(NumericalError):
    pass


class SingularDesign(NumericalError):
    pass


class IllConditioned(NumericalError):
    pass


class DegenerateColumn(NumericalError):
    pass


class MaskingFailed(NumericalError):
    pass


# ==================== I/O ====================

class DataFileError(CovmodeError, OSError):
    """Raised when an input file exists but its content cannot be used"""
    exit_code = EXIT_IO
