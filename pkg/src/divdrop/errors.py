"""Exception hierarchy shared across the package."""


class DivdropError(Exception):
    """Base class for all package errors."""


class InvalidMatrix(DivdropError, ValueError):
    pass


class EmptyCalibration(DivdropError, ValueError):
    pass


class DegenerateKernel(DivdropError, ValueError):
    pass


class DegenerateSampler(DivdropError, RuntimeError):
    pass


class RankDeficient(DivdropError, ValueError):
    pass


class ShapeError(DivdropError, ValueError):
    pass


class InvalidMask(DivdropError, ValueError):
    pass


class DivergedTraining(DivdropError, RuntimeError):
    pass


class IngestError(DivdropError, ValueError):
    """Malformed tabular input; the message names the offending row/column."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column
