"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible extents."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class DataError(ValueError):
    """An input record (label, camera id, file) is out of contract."""


class UsageError(ValueError):
    """An API was called outside its contract (e.g. backward on a non-scalar)."""


class NumericsError(RuntimeError):
    """A numerical invariant broke at runtime (NaN/Inf loss, divergence)."""
