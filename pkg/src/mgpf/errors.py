"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operands live in spaces of different dimension."""


class SingularityError(ValueError):
    """A covariance, precision, or pairwise-sum matrix is not safely invertible."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DegenerateMixtureError(ValueError):
    """Every weight of a mixture or product plan is zero (log-weight -inf)."""


class EmptyObservationError(RuntimeError):
    """A scan carries no usable wall evidence for the observation model."""


class MapError(ValueError):
    """A wall map cannot satisfy the request (no free space, infeasible layout)."""


class TrajectoryError(RuntimeError):
    """The simulated robot cannot find a legal move."""
