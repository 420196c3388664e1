"""Exception types raised across the package."""


class MfgFlowError(Exception):
    pass


class UnsupportedTransport(MfgFlowError):
    pass


class ParamOutOfRange(MfgFlowError, ValueError):
    pass


class NewtonDiverged(MfgFlowError):
    def __init__(self, message, alpha=None, residual=None, in_cone=None):
        super().__init__(message)
        self.alpha = alpha
        self.residual = residual
        self.in_cone = in_cone


class SingularHessian(MfgFlowError):
    pass


class PicardDiverged(MfgFlowError):
    def __init__(self, message, iterations=0, residual=float("nan")):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class IntervalUnderflow(MfgFlowError):
    pass


class CapExceeded(MfgFlowError):
    pass


class H2SufficientConditionFails(MfgFlowError):
    pass


class ConfigError(MfgFlowError, ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
