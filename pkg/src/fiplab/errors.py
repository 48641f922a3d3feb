"""Exception hierarchy shared by every fiplab module."""


class FipLabError(Exception):
    """Base class for all errors raised by fiplab."""


class ShapeError(FipLabError, ValueError):
    """Array dimensions do not chain or do not match the model."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class NumericalError(FipLabError, ArithmeticError):
    """A computation produced NaN or inf."""

    def __init__(self, message, layer=None, epoch=None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)
        self.layer = layer
        self.epoch = epoch


class DivergenceError(NumericalError):
    """Training or purification loss became non-finite."""


class CheckpointError(FipLabError):
    """Malformed or unsupported model checkpoint."""


class IdxError(FipLabError):
    """Base class for IDX container problems."""


class WrongMagicError(IdxError):
    pass


class TruncatedPayloadError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


class TriggerBoundsError(FipLabError, ValueError):
    """Trigger does not fit inside the image."""


class SplitError(FipLabError, ValueError):
    """Requested split leaves a class without samples."""


class SvdConvergenceError(FipLabError):
    def __init__(self, off_norm, sweeps):
        super().__init__(f"Jacobi SVD did not converge in {sweeps} sweeps (off-norm {off_norm:.3e})")
        self.off_norm = off_norm
        self.sweeps = sweeps


class OracleSizeError(FipLabError, ValueError):
    """Dense oracle requested for a model above the size guard."""


class ConfigError(FipLabError):
    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


class PrerequisiteError(FipLabError):
    def __init__(self, stage, missing):
        super().__init__(f"missing artifact {missing}; run stage '{stage}' first")
        self.stage = stage
        self.missing = missing


class SchemaMismatchError(FipLabError):
    pass
