"""Exception types raised across the package."""


class HybridGlueError(Exception):
    """Base class for all package errors."""


# simulation
class EscapedFlowSet(HybridGlueError):
    pass


class MaxJumpsExceeded(HybridGlueError):
    pass


class NonTransversalEvent(HybridGlueError):
    pass


class OutOfHorizon(HybridGlueError):
    pass


class EmptySampleSet(HybridGlueError):
    pass


class NotApplicable(HybridGlueError):
    pass


# gluing
class SamplerEmpty(HybridGlueError):
    pass


class MatchingViolation(HybridGlueError):
    pass


class LeftGluedDomain(HybridGlueError):
    pass


class NoParameterization(HybridGlueError):
    pass


class NotInGluedDomain(HybridGlueError):
    pass


class NoOutputMap(HybridGlueError):
    pass


# observers
class OrderNonPositive(HybridGlueError):
    pass


class ImmersionViolation(HybridGlueError):
    def __init__(self, message, residual=None, point=None):
        super().__init__(message)
        self.residual = residual
        self.point = point


class I1Violated(ImmersionViolation):
    pass


class I2Violated(ImmersionViolation):
    pass


class SignalTooSparse(HybridGlueError):
    pass


class CovarianceDivergence(HybridGlueError):
    pass


# tracking
class NotInputAffine(HybridGlueError):
    pass


class SingularGamma(HybridGlueError):
    pass


# analysis
class DegenerateSampler(HybridGlueError):
    pass


class NoJumpsObserved(UserWarning):
    pass


# models / cli
class BadEnergyBand(HybridGlueError, ValueError):
    pass


class NotHurwitz(HybridGlueError, ValueError):
    pass


class ConfigError(HybridGlueError):
    pass


class ModelNotFound(HybridGlueError):
    pass


class PipelineError(HybridGlueError):
    pass
