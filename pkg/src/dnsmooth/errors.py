"""Exception hierarchy shared across the package.

Contract violations (bad shapes, bad flags, impossible requests) are
distinguished from numerical failures (divergence, factorization breakdown)
so the CLI can map them to different exit codes.
"""


class ContractViolation(ValueError):
    """Input violates a documented precondition (dimension mismatch, bad flag)."""


class CalibrationError(ContractViolation):
    """Noise calibration is impossible, e.g. an all-constant signal."""


class NumericalError(ArithmeticError):
    """A numerical operation failed (factorization, overflow, non-finite values)."""


class SimulationDivergence(NumericalError):
    """A simulated trajectory left the representable range."""


class InferenceDivergence(NumericalError):
    """Smoothing produced a non-finite belief.

    Attributes:
        step: 1-based time index at which the divergence was detected.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class OptimizerError(NumericalError):
    """The optimizer received non-finite gradients."""


class TrainingDivergence(NumericalError):
    """Training hit a non-finite loss; the last finite parameters are attached.

    Attributes:
        epoch, batch: location of the failure.
        last_params: last known-finite parameter state, or None.
    """

    def __init__(self, message: str, epoch: int, batch: int, last_params=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.last_params = last_params
