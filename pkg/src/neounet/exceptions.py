class NeoUNetError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(NeoUNetError, ValueError):
    pass


class InputShapeError(NeoUNetError, ValueError):
    pass


class DataIntegrityError(NeoUNetError, ValueError):
    pass


class NonFiniteLossError(NeoUNetError, RuntimeError):
    pass
