"""Exception types raised across the package."""


class CdrError(Exception):
    """Base class for every error raised by :mod:`cdr`."""


class InvalidInputError(CdrError, ValueError):
    pass


class DegenerateTargetError(InvalidInputError):
    """The target variable has zero entropy, so normalized MI is undefined."""


class DegenerateLabelsError(InvalidInputError):
    """Training data contains a single class."""


class InvalidPolicyError(CdrError, ValueError):
    pass


class InsufficientEvidenceError(CdrError):
    """The outcome window holds no observation for one of the strategies."""


class TrainingDivergedError(CdrError, ArithmeticError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss!r})")
        self.epoch = epoch
        self.loss = loss


class FeatureError(CdrError):
    """A feature extractor failed; ``dimension`` names which one."""

    def __init__(self, dimension: str, cause: Exception):
        super().__init__(f"{dimension}: {cause}")
        self.dimension = dimension
        self.cause = cause


class ConfigError(CdrError, ValueError):
    pass
