"""Exception hierarchy shared by every dxformer module."""


class DXFormerError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DXFormerError, ValueError):
    pass


class DTypeError(DXFormerError, TypeError):
    pass


class ConfigError(DXFormerError, ValueError):
    pass


class WiringError(DXFormerError, ValueError):
    """Encoder/decoder connections are inconsistent (missing cross input, wrong count)."""


class ContractError(DXFormerError, ValueError):
    pass


class NumericalError(DXFormerError, FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


class InputError(DXFormerError, ValueError):
    pass


class DataError(DXFormerError, ValueError):
    pass


class FormatError(DataError):
    pass


class LengthError(FormatError):
    pass


class CheckpointError(DXFormerError, ValueError):
    pass


class TrainingError(DXFormerError, RuntimeError):
    pass


class GradCheckError(DXFormerError, AssertionError):
    pass
