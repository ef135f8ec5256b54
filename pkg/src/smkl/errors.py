"""Exception hierarchy.

Every error carries a ``module`` tag so the command-line layer can report
where it came from, and an exit-code category (config, numerical,
convergence).
"""


class SMKLError(Exception):
    """Base class for all package errors."""

    module = "smkl"
    category = "numerical"

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context

    def to_dict(self):
        out = {"error": type(self).__name__, "module": self.module,
               "message": str(self)}
        if self.context:
            out["context"] = {k: _plain(v) for k, v in self.context.items()}
        return out


def _plain(v):
    try:
        return v.tolist()
    except AttributeError:
        return v if isinstance(v, (int, float, str, bool, type(None), list, dict)) else repr(v)


# kernels
class KernelError(SMKLError):
    module = "kernels"


class NotStochastic(KernelError):
    pass


class Reducible(KernelError):
    pass


class Periodic(KernelError):
    pass


class OutOfDomain(KernelError):
    """Parameter outside the family's box domain."""


class QuadratureFailure(KernelError):
    pass


# simulator
class SimulationError(SMKLError):
    module = "simulator"


class HorizonTooShort(SimulationError):
    pass


class WrongRegime(SimulationError):
    pass


# empirical
class EmpiricalError(SMKLError):
    module = "empirical"


class EmptyPath(EmpiricalError):
    pass


class NonFiniteValue(EmpiricalError):
    pass


# estimators
class EstimationError(SMKLError):
    module = "estimators"


class NoConvergence(EstimationError):
    category = "convergence"


class BoundaryHit(EstimationError):
    category = "convergence"


class SingularHessian(EstimationError):
    pass


class DegenerateSeries(EstimationError):
    pass


# oracle
class OracleError(SMKLError):
    module = "oracle"


class DivergentIntegral(OracleError):
    pass


class MultipleMaxima(OracleError):
    pass


# asymptotics
class AsymptoticsError(SMKLError):
    module = "asymptotics"


class SingularMatrix(AsymptoticsError):
    pass


class IdentityViolation(AsymptoticsError):
    pass


class SingularBread(AsymptoticsError):
    pass


class UnvisitedState(AsymptoticsError):
    pass


# experiments
class ExperimentError(SMKLError):
    module = "experiments"


class OracleFailure(ExperimentError):
    pass


class ExcessiveFailures(ExperimentError):
    category = "convergence"


class PerturbationInvalid(ExperimentError):
    pass


# cli
class ConfigInvalid(SMKLError):
    module = "cli"
    category = "config"
