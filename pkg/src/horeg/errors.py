"""Exception hierarchy.

``DataError`` subclasses signal malformed or unusable inputs, ``NumericalError``
subclasses signal optimizer or geometry failures. The CLI maps the two
families to exit codes 2 and 3.
"""


class HoregError(Exception):
    pass


class DataError(HoregError):
    pass


class NumericalError(HoregError):
    pass


class DegenerateParam(NumericalError):
    """Two 6D rotation vectors are parallel or vanish."""


class DegenerateConfiguration(NumericalError):
    """Point sets without enough spread to fix a transform."""


class DivergedRefinement(NumericalError):
    pass


class DegenerateField(NumericalError):
    pass


class InsufficientPoints(DataError):
    pass


class NoCorrespondences(DataError):
    pass


class EmptyMesh(DataError):
    pass


class NoValidFrames(DataError):
    pass


class EmptyBounds(DataError):
    pass


class NoMaskedPixels(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyGroup(DataError):
    pass
