"""Exception hierarchy shared across the package."""


class MedtokError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MedtokError):
    """Operands have incompatible or unexpected shapes."""


class NumericError(MedtokError):
    """A numeric value violated a contract (NaN/Inf, zero norm, ...)."""


class IngestError(MedtokError):
    """A corpus, graph, or mapping file failed validation."""


class FormatError(MedtokError):
    """A binary or serialized file does not match its declared format."""


class CorruptionError(MedtokError):
    """Stored content does not match its recorded content hash."""


class ServiceError(MedtokError):
    """A remote service call failed after retries."""


class ContractError(MedtokError):
    """A remote service response violated the agreed schema."""


class ConfigError(MedtokError):
    """An invalid configuration value."""


class UnknownCodeError(MedtokError):
    """A code id is not present in the corpus."""
