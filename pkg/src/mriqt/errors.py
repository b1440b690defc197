"""Exception types raised across the package.

Everything derives from :class:`MRIQTError`. Errors caused by bad input data
(as opposed to programming errors) also derive from :class:`DataError`, which
the CLI maps to exit code 2.
"""


class MRIQTError(Exception):
    pass


class DataError(MRIQTError):
    pass


# volume I/O and preprocessing
class UnreadableFile(DataError):
    pass


class CorruptHeader(DataError):
    pass


class NonFiniteData(DataError):
    pass


class UnwritablePath(DataError):
    pass


class ConstantVolume(DataError):
    pass


class DegenerateTarget(DataError):
    pass


class ShapeMismatch(DataError, ValueError):
    pass


# k-space
class SingularFrequency(DataError):
    pass


class NonNegligibleImaginary(DataError):
    pass


class BinningMismatch(DataError, ValueError):
    pass


# diffusion / networks
class InvalidT(MRIQTError, ValueError):
    pass


class StepOutOfRange(MRIQTError, ValueError):
    pass


class IndivisibleSpatialDims(DataError, ValueError):
    pass


class InsufficientData(DataError):
    pass


class EmptyPairs(DataError):
    pass


# evaluation
class ZeroVariance(DataError):
    pass


class TooFewSamples(DataError):
    pass


class VolumeTooSmall(DataError):
    pass


class SubjectMismatch(DataError):
    pass


# phantoms
class InvalidGeometry(DataError, ValueError):
    pass
