"""Exception types shared across the toolkit."""


class TransferBenchError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(TransferBenchError):
    """Input or weight dimensions do not chain."""


class NumericError(TransferBenchError):
    """Non-finite values where finite arithmetic is required."""


class FormatError(TransferBenchError):
    """A file does not match its declared format (magic/version/header)."""


class CorruptionError(TransferBenchError):
    """A file matches its format but its payload is inconsistent."""


class DataError(TransferBenchError):
    """Invalid or empty dataset-level input."""


class ConfigError(TransferBenchError):
    """Invalid configuration value; message names the offending field."""
