"""Exception hierarchy shared across the package."""


class SDAError(Exception):
    """Base class for all package errors."""


class SingularStateError(SDAError, ValueError):
    """State at (or within the guard radius of) a primary's center."""


class IntegrationError(SDAError, RuntimeError):
    """Step-size controller could not meet tolerance."""


class NoCrossingError(SDAError, RuntimeError):
    pass


class DegenerateGeometryError(SDAError, ValueError):
    """Zero-length projection or singular arccos derivative."""


class InsideBodyError(SDAError, ValueError):
    pass


class CatalogError(SDAError, ValueError):
    pass


class CatalogParseError(CatalogError):
    pass


class CatalogSchemaError(CatalogError):
    pass


class EmptyFamilyError(CatalogError):
    pass


class InnovationSingularError(SDAError, ArithmeticError):
    def __init__(self, message, condition=float("inf")):
        super().__init__(f"{message} (condition estimate {condition:.3g})")
        self.condition = condition


class TrackError(SDAError, RuntimeError):
    pass


class InfeasibleError(SDAError, ValueError):
    pass


class CapExceededError(SDAError, ValueError):
    pass


class ConfigError(SDAError, ValueError):
    pass
