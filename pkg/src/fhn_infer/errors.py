"""Exception hierarchy shared across the package."""


class FHNError(Exception):
    """Base class for all package errors."""


class ConfigError(FHNError):
    """Invalid experiment configuration or CLI arguments."""


class StepSizeUnderflow(FHNError):
    """Adaptive integrator step fell below the configured floor."""


class NonFiniteState(FHNError):
    """ODE state left the finite range."""


class RejectionExhausted(FHNError):
    """Rejection sampler hit its redraw limit."""


class LengthMismatch(FHNError, ValueError):
    pass


class IndexOutOfRange(FHNError, IndexError):
    pass


class FormatVersionMismatch(FHNError):
    """File does not carry the expected magic string or is truncated."""


class ShapeError(FHNError, ValueError):
    pass


class NonFiniteLoss(FHNError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class EmptyInput(FHNError, ValueError):
    pass


class ZeroTruthValue(FHNError, ValueError):
    pass


class ConstantTruth(FHNError, ValueError):
    pass


class InvalidK(FHNError, ValueError):
    pass
