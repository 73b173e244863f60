"""Exception types raised across the package."""


class MarketError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MarketError, ValueError):
    """Inputs have the wrong shape, violate a contract, or reference a bad index."""


class UndefinedRatioError(MarketError, ArithmeticError):
    """A ratio or logarithm is undefined because a referenced price is zero."""


class DegenerateStateError(MarketError, ArithmeticError):
    """An activated buyer has zero utility, so the update rule cannot divide by it."""


class ConfigError(MarketError, ValueError):
    """A dynamics or experiment configuration is inconsistent."""


class OracleFailureError(MarketError, RuntimeError):
    """The cross-validated equilibrium oracle could not certify an equilibrium.

    Attributes:
        trajectories: partial trajectories of the dynamics that were run, keyed
            by rule name.
        certificate: the rejected certificate, when one was produced.
    """

    def __init__(self, message, trajectories=None, certificate=None):
        super().__init__(message)
        self.trajectories = trajectories or {}
        self.certificate = certificate
