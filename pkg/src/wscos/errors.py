"""Exception hierarchy shared by every module."""


class WscosError(Exception):
    """Base class for all package errors."""


class ContractError(WscosError, ValueError):
    """An operation was called with inputs that violate its preconditions."""


class ProviderError(WscosError):
    """A mask provider could not produce a mask for one view."""


class MaskNotFoundError(ProviderError, LookupError):
    pass


class FormatError(WscosError):
    """A file on disk is malformed or does not match the expected layout."""


class PipelineError(WscosError):
    pass


class GenerationError(WscosError):
    pass


class TrainingError(WscosError):
    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class ConfigError(WscosError):
    """A run configuration has unknown keys or values of the wrong type."""
