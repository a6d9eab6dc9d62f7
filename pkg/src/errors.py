"""Exception hierarchy for the TransNets package."""


class TransNetsError(Exception):
    """Base class for every error raised by this package."""


class DatasetFormatError(TransNetsError, ValueError):
    """Raised when a dataset file cannot be parsed or its format is unknown."""


class ConfigError(TransNetsError, ValueError):
    """Raised when configuration validation fails."""


class ShapeError(TransNetsError, ValueError):
    """Raised when tensor shapes do not agree."""


class GradientError(TransNetsError, ValueError):
    """Raised when gradients cannot be computed for a node."""


class CheckpointError(TransNetsError, ValueError):
    """Raised for corrupt, truncated or incompatible checkpoint files."""
