"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration."""


class ShapeError(ValueError):
    """Array shapes do not agree with the declared layout."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class LoadError(RuntimeError):
    """A tensor archive is missing names or has mismatched shapes."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


class StatsMismatchError(RuntimeError):
    """Checkpoint normalization statistics differ from the dataset's."""
