"""Exception types shared across the toolkit."""


class EtsCausalError(Exception):
    """Base class for all toolkit errors."""


class PanelError(EtsCausalError, ValueError):
    """Malformed input data or a violated panel invariant."""


class EstimationError(EtsCausalError, RuntimeError):
    """An estimator could not produce a valid result."""


class ConfigError(EtsCausalError, ValueError):
    """Invalid run configuration."""
