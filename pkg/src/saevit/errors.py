"""Exception types raised across the package."""


class SaevitError(Exception):
    """Base class; the CLI turns these into one-line diagnostics."""


class DimensionError(SaevitError, ValueError):
    pass


class ConfigError(SaevitError, ValueError):
    pass


class InputError(SaevitError, ValueError):
    pass


class StateError(SaevitError, RuntimeError):
    pass


class TrainingError(SaevitError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class VerificationError(SaevitError, AssertionError):
    pass


class FormatError(SaevitError, ValueError):
    pass
