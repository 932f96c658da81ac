"""Exception types shared across the package."""


class ScreenError(Exception):
    """Base class for every error raised by this package."""


class ContractError(ScreenError):
    """An argument violates a documented shape or type contract."""


class DomainError(ScreenError):
    """A numeric argument lies outside its mathematical domain."""


class DataQualityError(ScreenError):
    """Input data violate an assumption the method relies on."""


class ConfigError(ScreenError):
    """A configuration value is out of bounds or inconsistent."""


class EstimationError(ScreenError):
    """A plug-in estimate cannot be formed from the supplied data."""


class DiagnosticError(ScreenError):
    """A diagnostic quantity is undefined for the supplied draws."""


class InitializationError(ScreenError):
    """Sampler initialization produced an unusable state."""


class PlateFileError(ScreenError):
    """A plate or screen file failed to parse or validate."""
