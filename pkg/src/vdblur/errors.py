class ConfigurationError(ValueError):
    """Invalid network, window or layer configuration."""


class DatasetError(ValueError):
    """Dataset directory missing, malformed or unpaired."""


class TrainingError(RuntimeError):
    """Training diverged or could not proceed."""
