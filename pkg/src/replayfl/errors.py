"""Exception types raised across the package.

Every failure mode callers are expected to distinguish gets its own class;
all of them derive from ReplayFLError so a bare ``except ReplayFLError``
still catches everything we raise deliberately.
"""


class ReplayFLError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ReplayFLError, ValueError):
    """An option value is outside its legal range."""


class ShapeError(ReplayFLError, ValueError):
    """Tensor dimensions are incompatible; the message names both shapes."""


class LabelError(ReplayFLError, ValueError):
    """A label is outside the registered class range."""


class NumericsError(ReplayFLError, ArithmeticError):
    """A public operation produced non-finite values (NaN/Inf)."""


class DatasetFormatError(ReplayFLError, ValueError):
    """Base class for embedding-file parsing failures."""


class BadMagicError(DatasetFormatError):
    """File does not start with the expected magic bytes."""


class VersionError(DatasetFormatError):
    """File declares an unsupported format version."""


class TruncatedFileError(DatasetFormatError):
    """File is shorter (or longer) than its header promises."""


class CollectionError(ReplayFLError, ValueError):
    """Replay-pool collection failed; the message names the client."""


class SamplingError(ReplayFLError, ValueError):
    """A replay batch was requested for a class the pool does not hold."""


class ClientDataError(ReplayFLError, ValueError):
    """A client has no usable local data."""


class ProtocolError(ReplayFLError, RuntimeError):
    """A federation stage was invoked in an illegal state."""


class AggregationError(ReplayFLError, ValueError):
    """Client updates cannot be aggregated; the message names the client."""


class RegistryError(ReplayFLError, ValueError):
    """Class registry conflict (duplicate or non-contiguous expansion)."""


class DegenerateEncodingError(ReplayFLError, ArithmeticError):
    """An encoder output had zero norm and cannot be normalized."""


class EvaluationError(ReplayFLError, ValueError):
    """Evaluation was requested on an empty or mislabeled test set."""
