"""Exception types shared across the package."""


class Nodule3DError(Exception):
    """Base class for all errors raised by nodule3d."""


class InvalidShapeError(Nodule3DError, ValueError):
    pass


class InvalidConfigError(Nodule3DError, ValueError):
    pass


class InvalidUseError(Nodule3DError, RuntimeError):
    pass


class InvalidLabelError(Nodule3DError, ValueError):
    pass


class InvalidInputError(Nodule3DError, ValueError):
    pass


class DegenerateDataError(Nodule3DError, ValueError):
    pass


class UndefinedMetricError(Nodule3DError, ValueError):
    pass


class MissingModelError(Nodule3DError, RuntimeError):
    pass


class LoadError(Nodule3DError, IOError):
    pass


class TrainingError(Nodule3DError, RuntimeError):
    """Raised when training hits a non-finite loss."""

    def __init__(self, message, batch_seed=None, dump_path=None):
        super().__init__(message)
        self.batch_seed = batch_seed
        self.dump_path = dump_path
