class NeuroplanError(Exception):
    pass


class ContractError(NeuroplanError, ValueError):
    """A caller broke an operation's preconditions."""


class FormatError(NeuroplanError):
    """A file on disk is malformed or truncated."""


class VersionError(FormatError):
    pass


class ConfigurationError(NeuroplanError):
    """Missing models, clouds, or inconsistent run settings."""


class GenerationError(NeuroplanError):
    """Random generation gave up after too many rejections."""
