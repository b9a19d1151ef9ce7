"""Exception hierarchy shared by every module.

Validation-type failures derive from :class:`ValidationError` (CLI exit code 1);
numerical or runtime failures derive from :class:`NumericalError` (exit code 2).
"""


class EEGAlignError(Exception):
    """Base class for all package errors."""


class ValidationError(EEGAlignError, ValueError):
    """Input violates a documented precondition."""


class FormatError(ValidationError):
    """On-disk pack is missing files or has an unreadable manifest."""


class CorruptionError(FormatError):
    """Binary blob size disagrees with the manifest."""


class RangeError(ValidationError):
    """A window, rate or scalar lies outside its admissible range."""


class UnsupportedRateError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class HoldoutRuleError(ValidationError):
    pass


class SamplingError(ValidationError):
    pass


class LookupFailure(ValidationError, KeyError):
    """Requested concept/image key is not present."""

    def __str__(self):
        return Exception.__str__(self)


class EmptyConceptError(ValidationError):
    pass


class AlignmentError(ValidationError):
    """Two banks do not share item keys in the same order."""


class NormalizationError(ValidationError):
    """A zero (or non-finite) row cannot be unit-normalized."""


class AmbiguityError(ValidationError):
    pass


class CoverageError(ValidationError):
    """A bank lacks a vector required by a dataset or schedule."""


class DegenerateInputError(ValidationError):
    pass


class PairingError(ValidationError):
    pass


class DesignValidationError(ValidationError):
    """Experiment grid varies factors that are not under study."""


class EstimationError(ValidationError):
    pass


class NumericalError(EEGAlignError, ArithmeticError):
    """Numerical failure: singular matrices, non-finite losses."""
