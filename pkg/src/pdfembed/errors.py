"""Exception hierarchy.

Two families matter to callers (and map to CLI exit codes):
``InputError`` for bad arguments, files, or ranges (exit 2), and
``NumericalError`` for solver or training failures (exit 3).
"""


class PdfEmbedError(Exception):
    exit_code = 1


class InputError(PdfEmbedError, ValueError):
    exit_code = 2


class NumericalError(PdfEmbedError, ArithmeticError):
    exit_code = 3


class LevelOutOfRange(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class CorruptFile(InputError):
    pass


class DuplicateId(InputError):
    pass


class ZeroNorm(InputError):
    pass


class Unsolvable(NumericalError):
    """No amplitude-compatible spread parameter exists."""


class NonnegativityViolated(Unsolvable):
    pass


class DegenerateSlope(Unsolvable):
    pass


class ShapeViolation(NumericalError):
    def __init__(self, message, index):
        super().__init__(message)
        self.index = index


class ZeroVariance(NumericalError):
    pass


class DomainError(NumericalError):
    pass


class Divergence(NumericalError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step
