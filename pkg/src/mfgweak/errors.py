"""Exception types raised by the solver stack."""


class MfgError(Exception):
    """Base class for all library errors."""


class NonConvergence(MfgError):
    def __init__(self, iterations, residual):
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"Newton solve did not converge after {iterations} iterations "
            f"(residual {residual:.3e}); the Lagrangian may not be strongly convex"
        )


class EvaluatorFailure(MfgError):
    def __init__(self, point, message="evaluator returned non-finite values"):
        self.point = point
        super().__init__(f"{message} at {point!r}")


class NonFinite(MfgError):
    def __init__(self, particle, step, what="state"):
        self.particle = particle
        self.step = step
        super().__init__(
            f"non-finite {what} for particle {particle} at step {step}; "
            "the time step is probably too large"
        )


class SingularFlow(MfgError):
    def __init__(self, particle, step, condition):
        self.particle = particle
        self.step = step
        self.condition = condition
        super().__init__(
            f"tangent flow of particle {particle} is singular at step {step} "
            f"(condition number {condition:.3e})"
        )


class DepthUnsupported(MfgError):
    pass


class ModeUnsupported(MfgError):
    def __init__(self, n, d, message=None):
        self.n = n
        self.d = d
        super().__init__(message or f"exact W2 unsupported for N={n}, d={d}")


class RegressionSingular(MfgError):
    def __init__(self, step, condition=float("nan")):
        self.step = step
        self.condition = condition
        super().__init__(
            f"regression design is singular at step {step} (condition {condition:.3e})"
        )


class ShapeMismatch(MfgError, ValueError):
    pass


class NoConvergence(MfgError):
    def __init__(self, max_iter, residual_history):
        self.max_iter = max_iter
        self.residual_history = list(residual_history)
        last = self.residual_history[-1] if self.residual_history else float("nan")
        super().__init__(
            f"Picard iteration did not converge in {max_iter} iterations "
            f"(last residual {last:.3e})"
        )


class MissingEvaluator(MfgError):
    pass


class InsufficientNodes(MfgError):
    pass


class BandwidthInvalid(MfgError, ValueError):
    pass


class ConfigInvalid(MfgError):
    def __init__(self, line, message):
        self.line = line
        self.message = message
        where = f"line {line}: " if line else ""
        super().__init__(f"{where}{message}")


class MissingArtifacts(MfgError):
    pass
