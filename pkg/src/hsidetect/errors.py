"""Exception taxonomy shared by every module.

Each exception carries a stable ``category`` string so the CLI can print
machine-parsable error lines and map them to a nonzero exit code.
"""


class HsiDetectError(Exception):
    """Base class for all errors raised by this package."""

    category = "error"


class ArgError(HsiDetectError, ValueError):
    """An argument violates a documented precondition."""

    category = "arg"


class ShapeError(HsiDetectError, ValueError):
    """Tensor shapes are inconsistent with the requested operation."""

    category = "shape"


class FormatError(HsiDetectError):
    """A file does not conform to its declared container format."""

    category = "format"


class DataError(HsiDetectError):
    """File contents parse but violate data invariants (NaN, negatives)."""

    category = "data"


class IoError(HsiDetectError):
    """The operating system refused a read or write."""

    category = "io"


class ConfigError(HsiDetectError):
    """A configuration value is invalid or inconsistent."""

    category = "config"


class DivergedError(HsiDetectError):
    """Training produced a non-finite loss."""

    category = "diverged"


class KSelectionError(HsiDetectError):
    """The MSLE balancing factor cannot be derived from the given errors."""

    category = "kselection"


class ThresholdError(HsiDetectError):
    """Threshold sweep impossible (validation data has a single class)."""

    category = "threshold"
