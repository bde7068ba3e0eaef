"""Exception types raised across the package."""


class FlexCtrlError(Exception):
    pass


class DimensionError(FlexCtrlError, ValueError):
    pass


class ParameterError(FlexCtrlError, ValueError):
    pass


class InputError(FlexCtrlError, ValueError):
    pass


class ConfigError(FlexCtrlError, ValueError):
    pass


class FormatError(FlexCtrlError, ValueError):
    pass


class GenerationError(FlexCtrlError, RuntimeError):
    pass


class NumericError(FlexCtrlError, FloatingPointError):
    pass
