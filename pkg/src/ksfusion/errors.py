class ConfigError(ValueError):
    """Invalid configuration or hyperparameter."""


class DataFormatError(ValueError):
    """A dataset or checkpoint file does not match its declared format."""


class TrainingError(RuntimeError):
    """Training diverged or could not proceed."""
