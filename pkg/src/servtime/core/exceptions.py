class ServtimeError(Exception):
    """Base error; `exit_code` is what the CLI exits with."""

    exit_code = 1


class ConfigError(ServtimeError):
    """Config error."""

    exit_code = 3


class MissingInputError(ServtimeError):
    """Input file not found."""

    exit_code = 4


class DataError(ServtimeError):
    """Malformed or insufficient data."""

    exit_code = 5


class DimensionError(DataError):
    """Tensor shape does not match the layer spec."""

    pass


class SamplingError(DataError):
    """Sampler called outside its domain."""

    pass


class DivergenceError(ServtimeError):
    """Training produced a non-finite loss or gradient."""

    exit_code = 6

    def __init__(self, message: str, checkpoint: str | None = None) -> None:
        if checkpoint:
            message = f"{message} (last good parameters saved to {checkpoint})"
        super().__init__(message)
        self.checkpoint = checkpoint


class CheckpointError(ServtimeError):
    """Unreadable or incompatible checkpoint."""

    exit_code = 7
