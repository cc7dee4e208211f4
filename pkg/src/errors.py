EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


class CsiError(Exception):
    """Base class for every error raised by the toolkit."""

    exit_code = EXIT_DATA


class UsageError(CsiError, ValueError):
    exit_code = EXIT_USAGE


class ConfigInvalid(CsiError, ValueError):
    exit_code = EXIT_USAGE


# tensor-core / nn shape errors
class ShapeMismatch(CsiError, ValueError):
    pass


class KernelTooLarge(ShapeMismatch):
    pass


class PoolTooLarge(ShapeMismatch):
    pass


class BatchTooSmall(CsiError, ValueError):
    pass


class EmptyInput(CsiError, ValueError):
    pass


class LabelOutOfRange(CsiError, IndexError):
    pass


class FrozenNetwork(CsiError, RuntimeError):
    pass


# csi-model
class IndexOutOfRange(CsiError, IndexError):
    pass


class HeterogeneousShapes(CsiError, ValueError):
    pass


class InvariantViolation(CsiError, ValueError):
    pass


class BadMagic(CsiError, ValueError):
    pass


class VersionUnsupported(CsiError, ValueError):
    pass


class TruncatedStream(CsiError, ValueError):
    pass


class IoFailure(CsiError, OSError):
    pass


class TooFewInstances(CsiError, ValueError):
    pass


# sigproc
class DegenerateLength(CsiError, ValueError):
    pass


class LengthMismatch(CsiError, ValueError):
    pass


# framework
class ShapeIncompatible(CsiError, ValueError):
    pass


class ValidationFailed(CsiError, ValueError):
    def __init__(self, rule: str) -> None:
        super().__init__(rule)
        self.rule = rule


class InvalidKnob(CsiError, ValueError):
    exit_code = EXIT_USAGE


# harness
class DivergedLoss(CsiError, ArithmeticError):
    exit_code = EXIT_DIVERGED

    def __init__(self, epoch: int, loss: float) -> None:
        super().__init__(f"loss diverged at epoch {epoch}: {loss}")
        self.epoch = epoch
        self.loss = loss
