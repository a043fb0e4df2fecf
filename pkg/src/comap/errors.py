"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid experiment or scene configuration."""


class ContractError(ValueError):
    """A caller violated an operation precondition."""


class WireFormatError(RuntimeError):
    """Base class for message (de)serialization failures."""


class BadMagicError(WireFormatError):
    """Buffer does not start with the expected magic bytes."""


class VersionMismatchError(WireFormatError):
    """Wire format version not supported by this build."""


class TruncatedBufferError(WireFormatError):
    """Buffer ends before the declared payload does."""


class ArchMismatchError(WireFormatError):
    """Received field parameters do not match the local architecture."""
