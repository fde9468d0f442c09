class GoRenderError(Exception):
    """Base class for all package errors."""


class InvalidInput(GoRenderError, ValueError):
    pass


class DatasetCorrupt(GoRenderError):
    pass


class ContainerError(GoRenderError):
    pass


class TrainingDiverged(GoRenderError, RuntimeError):
    pass
