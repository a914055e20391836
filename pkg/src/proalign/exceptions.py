"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
1 usage, 2 data, 3 numeric.
"""


class ProAlignError(Exception):
    exit_code = 2


class UsageError(ProAlignError):
    exit_code = 1


class DataError(ProAlignError, ValueError):
    exit_code = 2


class NumericError(ProAlignError, ArithmeticError):
    exit_code = 3


# embedding matrices
class EmptyMatrix(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class NonFiniteValue(DataError):
    def __init__(self, row, col, msg=None):
        self.row = row
        self.col = col
        super().__init__(msg or f"non-finite value at ({row}, {col})")


class DimMismatch(DataError):
    pass


# file formats
class BadMagic(DataError):
    pass


class UnsupportedVersion(DataError):
    pass


class TruncatedPayload(DataError):
    pass


class DuplicateSlideId(DataError):
    pass


class UnknownSplit(DataError):
    pass


class BadLabel(DataError):
    pass


class MissingColumn(DataError):
    pass


class IndexGap(DataError):
    pass


class CountMismatch(DataError):
    pass


class TooFewSlides(DataError):
    pass


# prototype construction / refinement
class EmptyTrainSplit(DataError):
    pass


class DimMismatchAcrossSlides(DimMismatch):
    pass


class EmptyPool(DataError):
    pass


class TooFewPoints(DataError):
    pass


class EmptySlide(DataError):
    pass


# probe / metrics
class BadConfig(UsageError, ValueError):
    pass


class NonFiniteGradient(NumericError):
    pass


class LengthMismatch(DataError):
    pass


class NoSupportedClasses(DataError):
    pass


class EmptyRuns(DataError):
    pass
