"""Exception hierarchy shared by every solver module.

Each error carries the name of the module that raised it so the CLI can
report provenance when a run fails.
"""


class GmmBridgeError(Exception):
    """Base class for all solver errors"""

    module = "gmm_bridge"

    def __init__(self, message, module=None):
        super().__init__(message)
        if module is not None:
            self.module = module

    def __str__(self):
        return f"[{self.module}] {super().__str__()}"


class NotSPD(GmmBridgeError):
    module = "matrix_kit"


class DimensionMismatch(GmmBridgeError):
    pass


class IndexOutOfRange(GmmBridgeError):
    pass


class InfeasibleBridge(GmmBridgeError):
    module = "gaussian_bridge"


class DegenerateBridge(GmmBridgeError):
    module = "gaussian_bridge"


class Uncontrollable(GmmBridgeError):
    module = "covariance_steering"


class SteeringInfeasible(GmmBridgeError):
    """Covariance steering did not converge; the final residual is kept"""

    module = "covariance_steering"

    def __init__(self, message, residual=None, module=None):
        super().__init__(message, module)
        self.residual = residual


class BadMarginals(GmmBridgeError):
    module = "transport_plan"


class DegenerateDensity(GmmBridgeError):
    module = "mixture_policy"


class ModeMismatch(GmmBridgeError):
    module = "mixture_policy"


class SchemeMismatch(GmmBridgeError):
    module = "simulator"


class MissingControls(GmmBridgeError):
    module = "simulator"


class ConfigParseError(GmmBridgeError):
    module = "cli"

    def __init__(self, message, line=None, module=None):
        super().__init__(message, module)
        self.line = line


class ConfigValidationError(GmmBridgeError):
    module = "cli"

    def __init__(self, message, field=None, module=None):
        super().__init__(message, module)
        self.field = field
