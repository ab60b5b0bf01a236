"""Exception hierarchy shared by all modules."""


class RegmapError(Exception):
    """Base class for all library errors."""


class InadmissibleMesh(RegmapError):
    """The curved mesh cannot be linearised into a valid polytope mesh."""


class OutsideDomain(RegmapError):
    """A query point lies outside the mesh."""


class NoConvergence(RegmapError):
    """An iterative inversion did not converge."""


class PointNotOnBoundary(RegmapError):
    """A point expected on the boundary is too far from it."""


class InconsistentPeriodicity(RegmapError):
    """Periodic facet pairs do not have matching node layouts."""


class NonSPD(RegmapError):
    """A Gram matrix that must be positive definite is not."""


class NoFeature(RegmapError):
    """No boundary feature satisfies the detection criteria."""


class LineSearchFailure(RegmapError):
    """The line search could not produce sufficient decrease."""


class NonFiniteObjective(RegmapError):
    """The objective or its gradient evaluated to NaN or infinity."""


class CurveEdgeMismatch(RegmapError):
    """A boundary curve does not connect the vertices of its polytope edge."""


class Infeasible(RegmapError):
    """A constrained solve stalled above the feasibility tolerance."""


class ConfigError(RegmapError):
    """Base class for configuration problems."""

    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


class UnknownKey(ConfigError):
    """A configuration key is not recognised."""


class OutOfRange(ConfigError):
    """A configuration value violates its admissible range."""
