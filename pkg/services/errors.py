"""Exceptions raised by the 0D solver, optimizer, sampler and workflow."""

from typing import Optional


class LpnError(Exception):
    """Base class for every error raised by this package"""


class ModelValidationError(LpnError):
    """The LPN description or a configuration violates an invariant"""


class DimensionMismatch(LpnError):
    """Array shapes do not match the model layout"""


class NonConvergence(LpnError):
    def __init__(self, iterations: int, residual_norm: float, message: str = "Newton solve did not converge"):
        self.iterations = iterations
        self.residual_norm = residual_norm
        super().__init__(f"{message} after {iterations} iterations (|r|={residual_norm:.3e})")


class NewtonDivergence(NonConvergence):
    def __init__(self, iterations: int, residual_norm: float, time: Optional[float] = None):
        self.time = time
        where = f" at t={time:.6g}" if time is not None else ""
        super().__init__(iterations, residual_norm, f"Newton iteration diverged{where}")


class NonPeriodic(LpnError):
    def __init__(self, cycles: int, change: float, result=None):
        self.cycles = cycles
        self.change = change
        self.result = result
        super().__init__(f"No periodic state after {cycles} cycles (max relative change {change:.3e})")


class SingularNormalEquations(LpnError):
    """The damped normal equations could not be solved"""


class ModelFailure(LpnError):
    """A forward model evaluation failed for one parameter vector"""

    def __init__(self, theta, time: Optional[float] = None):
        self.theta = [float(v) for v in theta]
        self.time = time
        where = f" at t={time:.6g}" if time is not None and time == time else ""
        super().__init__(f"Forward model failed for theta={[round(v, 6) for v in self.theta]}{where}")


class AllParticlesFailed(LpnError):
    """Every particle in an SMC population produced a failed evaluation"""


class HandoffMissing(LpnError):
    """Resume requested without a hand-off request or response in the workspace"""


class WorkspaceLocked(LpnError):
    """Another pipeline instance holds the workspace lock"""


class StageError(LpnError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
