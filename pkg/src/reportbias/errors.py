"""Exception hierarchy shared by the library and the CLI."""


class ReportBiasError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ReportBiasError, ValueError):
    """Invalid configuration or mismatched dimensions."""


class InvalidInputError(ReportBiasError, ValueError):
    """An argument violates an operation's precondition."""


class NumericalError(ReportBiasError, ArithmeticError):
    """Training produced a non-finite value."""


class CorpusFormatError(ConfigError):
    """A corpus file does not follow the JSONL layout."""


class CheckpointError(ReportBiasError):
    """Base class for checkpoint loading failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class DimensionMismatchError(CheckpointError, ConfigError):
    pass
