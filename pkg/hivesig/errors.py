"""Exception hierarchy for hivesig.

Library code raises these; only the CLI turns them into exit codes.
The three branches carry the scripting contract:

    InputError          -> exit 2 (usage / unreadable input)
    DataError           -> exit 3 (data or shape fault)
    PipelineOrderError  -> exit 4 (compression steps in an impossible order)
"""


class HiveSigError(Exception):
    """Base class for every error raised by hivesig."""

    exit_code = 1


class InputError(HiveSigError, ValueError):
    """Bad argument, bad file, or bad configuration."""

    exit_code = 2


class DataError(HiveSigError, ValueError):
    """Data that is readable but unusable (shape, label, empty)."""

    exit_code = 3


class PipelineOrderError(HiveSigError):
    """Compression steps requested in an order that cannot run."""

    exit_code = 4


# audio_io
class MalformedHeader(InputError):
    pass


class UnsupportedEncoding(InputError):
    pass


class EmptyAudio(DataError):
    pass


class InvalidRate(InputError):
    pass


class InvalidFactor(InputError):
    pass


# tfrepr
class TooShort(DataError):
    pass


class InvalidBand(InputError):
    pass


class EmptyMatrix(DataError):
    pass


# autograd / network
class ShapeMismatch(DataError):
    pass


class InvalidProbability(InputError):
    pass


class ShapeIncompatible(DataError):
    """A network edit or spec leaves two adjacent layers disagreeing on shape."""

    def __init__(self, message: str, layer: str = ""):
        super().__init__(message)
        self.layer = layer


class UnknownLayer(InputError):
    pass


class EmptyClass(DataError):
    pass


class IoFailure(InputError):
    pass


class VersionMismatch(InputError):
    pass


class ChecksumMismatch(InputError):
    pass


# compress
class InvalidFraction(InputError):
    pass


class InvalidTemperature(InputError):
    pass


class EmptyCalibration(DataError):
    pass


# evalmetrics
class LengthMismatch(DataError):
    pass


class OutOfRangeClass(DataError):
    pass


class EmptyDataset(DataError):
    pass
