"""Exception hierarchy shared by all pisnet modules."""


class PISNetError(Exception):
    """Base class for every error raised by the package."""


class ShapeError(PISNetError, ValueError):
    pass


class NumericError(PISNetError, FloatingPointError):
    pass


class LayoutError(PISNetError, ValueError):
    pass


class ContractError(PISNetError, RuntimeError):
    """A documented precondition of an operation was violated."""


class ConfigError(PISNetError, ValueError):
    pass


class GenerationError(PISNetError, RuntimeError):
    pass


class IngestionError(PISNetError, OSError):
    pass


class BatchError(PISNetError, ValueError):
    pass


class ProtocolError(PISNetError, ValueError):
    pass


class CheckpointError(PISNetError, OSError):
    pass


class TrainingAborted(NumericError):
    """Raised when a loss term becomes NaN or infinite.

    ``term`` names the offending component (``l_g``, ``l_q``, ``l_m`` or
    ``l_final``) and ``diagnostics`` holds every component value seen at the
    failing step.
    """

    def __init__(self, term, diagnostics):
        self.term = term
        self.diagnostics = dict(diagnostics)
        super().__init__(f"non-finite loss term {term!r} at {self.diagnostics}")
