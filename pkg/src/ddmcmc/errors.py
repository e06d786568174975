"""Exception types raised across the package."""


class DDMCMCError(Exception):
    """Base class for all package errors."""


class ValidationError(DDMCMCError, ValueError):
    """Invalid configuration or input arguments."""


class Unsupported(ValidationError):
    pass


# mesh_fem
class NonPositivePermeability(DDMCMCError, ValueError):
    pass


class SingularSystem(DDMCMCError):
    pass


class SensorOffGrid(ValidationError):
    pass


class EdgeOffGrid(ValidationError):
    pass


# covariance_kl
class RootBracketFailure(DDMCMCError):
    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"no sign change in root bracket {index}")


class TruncationOverflow(DDMCMCError):
    pass


class PointOutsideDomain(ValidationError):
    pass


class QuadratureGridMismatch(ValidationError):
    pass


# field_model
class BasisMismatch(ValidationError):
    pass


class EmptySampleSet(ValidationError):
    pass


# gp_interface
class FactorizationFailure(DDMCMCError):
    pass


class DegenerateData(DDMCMCError):
    pass


class PoolExhausted(DDMCMCError):
    pass


# mh_sampler
class LengthMismatch(ValidationError):
    pass


class InitOutsideSupport(ValidationError):
    pass


# dd_orchestrator / experiment
class SensorOutsideDomain(ValidationError):
    pass


class MissingInterfaceModel(ValidationError):
    pass


class MissingArtifact(DDMCMCError):
    pass
