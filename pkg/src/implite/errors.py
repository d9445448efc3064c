"""Exception types shared across the package."""


class ImpError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ImpError, ValueError):
    """Operands have incompatible or invalid shapes."""


class ConfigError(ImpError, ValueError):
    """Invalid architecture or operation configuration."""


class FormatError(ImpError, ValueError):
    """Malformed file or blob content."""


class BoundsError(FormatError):
    """Declared lengths or offsets fall outside the available data."""


class ConsistencyError(ImpError, ValueError):
    """Cross-referenced pieces of a model disagree with each other."""


class CapacityError(ImpError, RuntimeError):
    """A KV cache or context window ran out of room."""


class TemplateError(ImpError, ValueError):
    """Chat template and supplied inputs do not line up."""
