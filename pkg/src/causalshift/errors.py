"""Exception hierarchy.

Input problems (bad data, wrong shapes, degenerate samples) derive from
:class:`InputError`; failures of a numerical procedure on otherwise valid input
derive from :class:`NumericError`. The CLI maps the two families to exit codes
2 and 3.
"""


class CausalShiftError(Exception):
    """Base class for every error raised by this package."""


class InputError(CausalShiftError, ValueError):
    pass


class NumericError(CausalShiftError, ArithmeticError):
    pass


class CsvFormatError(InputError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateSample(InputError):
    """A sample has zero spread where a scale estimate is required."""


class InsufficientData(InputError):
    pass


class GridMismatch(InputError):
    """Two grid densities do not share a step."""


class EmptyInput(InputError):
    pass


class IndexOutOfRange(InputError, IndexError):
    pass


class NoLabeledData(InputError):
    pass


class TooFewNonzero(InputError):
    pass


class DeconvolutionIllConditioned(NumericError):
    def __init__(self, message, clamped_fraction=None):
        self.clamped_fraction = clamped_fraction
        super().__init__(message)


class NotInjective(NumericError):
    pass


class InfeasibleMarginal(NumericError):
    pass


class ZeroEvidence(NumericError):
    pass


class WeightDegenerate(NumericError):
    pass
