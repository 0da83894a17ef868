"""Exception hierarchy. Every error carries a module-qualified code used by the CLI."""


class SolverError(Exception):
    module = "mvfbsde"

    @property
    def code(self) -> str:
        return f"{self.module}.{type(self).__name__}"


class CoreError(SolverError):
    module = "core"


class NonPositiveHorizon(CoreError, ValueError):
    pass


class WeightOverflow(CoreError, ValueError):
    pass


class ShapeMismatch(CoreError, ValueError):
    pass


class DimensionMismatch(CoreError, ValueError):
    pass


class Exact1dOnMultiD(CoreError, ValueError):
    pass


class CoeffsError(SolverError):
    module = "coeffs"


class UnknownProblem(CoeffsError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class SingularR(CoeffsError, ValueError):
    pass


class MissingDerivative(CoeffsError, ValueError):
    pass


class ForwardError(SolverError):
    module = "forward"


class NonFiniteState(ForwardError, FloatingPointError):
    pass


class GateViolated(SolverError, ValueError):
    """Raised when a well-posedness gate fails; `module` is set per raise site."""

    def __init__(self, message: str, module: str = "verify"):
        super().__init__(message)
        self.module = module


class BackwardError(SolverError):
    module = "backward"


class IllConditionedRegression(BackwardError, ArithmeticError):
    pass


class HomotopyError(SolverError):
    module = "homotopy"


class NoConvergence(HomotopyError, RuntimeError):
    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class ControlError(SolverError):
    module = "control"


class ArgminDiverged(ControlError, RuntimeError):
    pass


class VerifyError(SolverError):
    module = "verify"


class MissingConstant(VerifyError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class OracleError(SolverError):
    module = "oracle"


class RiccatiBlowup(OracleError, FloatingPointError):
    pass


class UnsupportedLQ(OracleError, NotImplementedError):
    pass


class ConfigParse(SolverError, ValueError):
    module = "cli"
