from .autodiff import ContractError, ShapeError


class ConfigError(ValueError):
    """Invalid hyperparameters or inputs inconsistent with the configuration."""


class DataError(ValueError):
    """Malformed or insufficient input data."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss) or cannot proceed."""


__all__ = ["ConfigError", "ContractError", "DataError", "ShapeError", "TrainingError"]
