class ChainViewError(Exception):
    """Base class for all errors raised by chainview."""


class ConfigError(ChainViewError):
    pass
