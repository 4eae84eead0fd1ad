class ConfigError(ValueError):
    """A configuration value violates a documented invariant."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
