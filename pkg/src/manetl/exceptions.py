"""Exception hierarchy shared by every part of the package."""


class ManetlError(Exception):
    """Base class for all errors raised by manetl."""


class DimensionError(ManetlError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class FusionError(DimensionError):
    """Two branch feature maps cannot be concatenated."""


class ConfigurationError(ManetlError, ValueError):
    """A layer, model or run was configured with invalid values."""


class ConfigParseError(ConfigurationError):
    """A configuration file or flag could not be parsed.

    ``key`` and ``line`` point at the offending entry when known.
    """

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class FormatError(ManetlError, ValueError):
    """An input file (image, manifest) is malformed or unsupported."""


class DataError(ManetlError):
    """A dataset is missing, empty or inconsistent."""


class CheckpointError(ManetlError):
    """A checkpoint could not be decoded. ``section`` names where it failed."""

    def __init__(self, message, section=None):
        self.section = section
        if section is not None:
            message = f"{message} [section: {section}]"
        super().__init__(message)


class NumericalError(ManetlError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""
