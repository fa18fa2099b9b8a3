"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes do not match the lattice or block scheme."""


class MeanZeroError(ValueError):
    """An operation defined on the mean-zero subspace received a vector with nonzero mean."""


class TableRangeError(ValueError):
    """A value fell outside the working interval of a tabulated function."""


class NumericalAbort(RuntimeError):
    """A solver or sampler failed (non-finite state, non-convergence, step underflow)."""


class ConfigError(ValueError):
    """Malformed experiment configuration."""
