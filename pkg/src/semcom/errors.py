class SemcomError(Exception):
    pass


class ConfigError(SemcomError, ValueError):
    pass


class ShapeError(SemcomError, ValueError):
    pass


class NonFiniteError(SemcomError, FloatingPointError):
    pass


class CheckpointError(SemcomError):
    pass


class FrozenParameterError(SemcomError):
    """A parameter collection marked frozen changed during training."""


class TrainingDiverged(SemcomError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class MissingInputError(SemcomError, FileNotFoundError):
    """A required input file (image, checkpoint, predecessor phase) is absent."""
