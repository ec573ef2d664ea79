"""Exception hierarchy.

Everything raised on bad user input or bad data derives from
:class:`TopoPatchError`; the CLI maps these to exit code 2 and anything
else to exit code 3.
"""


class TopoPatchError(Exception):
    """Base class for all data/validation errors raised by this package."""


class ParameterError(TopoPatchError):
    """An argument is outside its documented range."""


# -- volume I/O ---------------------------------------------------------------

class VolumeFileMissing(TopoPatchError):
    """The requested volume file does not exist."""


class MalformedHeader(TopoPatchError):
    """The RVOL magic or JSON header line is invalid."""


class PayloadSizeMismatch(TopoPatchError):
    """Header dims disagree with the number of payload values."""


class NonFiniteValues(TopoPatchError):
    """A volume contains NaN or infinite voxels."""


class TilingError(TopoPatchError):
    """Patch dims do not tile the volume dims."""


# -- models -------------------------------------------------------------------

class ShapeError(TopoPatchError):
    """A tensor shape does not match the model specification."""


class ModelSpecError(TopoPatchError):
    """A layer list violates the model structural invariants."""


class DataError(TopoPatchError):
    """A data set is empty or otherwise unusable."""


class AlignmentError(TopoPatchError):
    """Paired inputs (encodings, features, labels) have mismatched lengths."""


class RangeError(TopoPatchError):
    """Input values fall outside the required interval."""


class DegenerateDataError(TopoPatchError):
    """A fit was requested on single-class data."""


# -- evaluation protocol ------------------------------------------------------

class StratificationError(TopoPatchError):
    """A class has too few subjects for the requested fold count."""


class MetricUndefinedError(TopoPatchError):
    """A metric is undefined for the given labels (single class)."""


class IncompleteGridError(TopoPatchError):
    """The run x fold grid of metric entries has missing cells."""


# -- persistence --------------------------------------------------------------

class VolumeTooLarge(TopoPatchError):
    """The brute-force oracle refuses volumes above its size guard."""


# -- synthesis ----------------------------------------------------------------

class PlacementError(TopoPatchError):
    """Phantom geometry could not be placed after bounded retries."""


# -- configuration ------------------------------------------------------------

class ConfigError(TopoPatchError):
    """A pipeline configuration file failed validation."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config field '{field}': {message}")
