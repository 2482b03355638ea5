"""Exception types raised by the package."""


class NlhomogError(Exception):
    """Base class for all package errors."""


class GeometryError(NlhomogError):
    """Invalid cell geometry or a mesh that cannot resolve it."""


class MeshError(NlhomogError):
    """Inconsistent mesh data (pairing, congruence, file contents)."""


class AssemblyError(NlhomogError):
    """Operator assembly received inconsistent inputs."""


class SolverError(NlhomogError):
    """A linear or nonlinear solve failed to reach its tolerance."""

    def __init__(self, message, residual=None, trajectory=None):
        super().__init__(message)
        self.residual = residual
        self.trajectory = trajectory


class OptimizationError(NlhomogError):
    """The control optimizer could not make progress."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ValidationError(NlhomogError):
    """A tensor or field violates a structural property."""


class OracleError(NlhomogError):
    """A dense reference computation was misused or is ill-posed."""
