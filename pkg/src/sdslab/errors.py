"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class SingularScheduleError(ZeroDivisionError):
    pass


class TrainingDivergence(RuntimeError):
    """Raised when a loss or gradient becomes non-finite.

    ``context`` carries whatever locates the failure (iteration index,
    time step, pose).
    """

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context


class EmptyContourError(ValueError):
    pass


class CorruptCheckpointError(ValueError):
    pass


class ConfigError(ValueError):
    pass
