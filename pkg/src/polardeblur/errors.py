class PolarDeblurError(Exception):
    pass


class DimensionError(PolarDeblurError, ValueError):
    pass


class DomainError(PolarDeblurError, ValueError):
    pass


class IntegrityError(PolarDeblurError):
    """A stored scene, manifest or checkpoint is missing or unreadable."""


class CheckpointFormatError(IntegrityError):
    pass


class ConfigError(PolarDeblurError, ValueError):
    pass


class TrainingDiverged(PolarDeblurError):
    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
