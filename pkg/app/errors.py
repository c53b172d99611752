class BootViTError(Exception):
    """Base exception for the training framework."""
    pass


class ShapeError(BootViTError):
    """Tensor shapes do not agree for the requested operation."""
    pass


class NumericError(BootViTError):
    """NaN or infinite values where finite ones are required."""
    pass


class GraphContractError(BootViTError):
    """Misuse of the computation graph or of gradient bookkeeping."""
    pass


class ConfigurationError(BootViTError):
    """Invalid or contradictory configuration."""
    pass


class DatasetFormatError(BootViTError):
    """Dataset file does not match the expected binary layout."""
    pass


class MetricsParseError(BootViTError):
    """Malformed metrics CSV row."""

    def __init__(self, path: str, line: int, reason: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {reason}")


class CheckpointError(BootViTError):
    """Checkpoint container cannot be read or does not match the model."""
    pass


class UsageError(BootViTError):
    """Command-line misuse."""
    pass


class DownloadError(BootViTError):
    """Dataset archive could not be fetched."""
    pass
