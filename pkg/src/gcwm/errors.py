"""Exception hierarchy shared across the package."""


class GcwmError(Exception):
    """Base class for all errors raised by gcwm."""


class InputError(GcwmError, ValueError):
    """Malformed data, schema, or arguments."""


class SizingError(GcwmError):
    """Sample too small for the requested number of components."""


class ConvergenceError(GcwmError):
    """An EM run failed to produce a usable fit."""


class CollapseError(ConvergenceError):
    """A mixture component lost (almost) all of its posterior mass."""

    def __init__(self, component, mass, threshold):
        self.component = component
        self.mass = mass
        self.threshold = threshold
        super().__init__(
            f"component {component} collapsed: posterior mass {mass:.4g} "
            f"below threshold {threshold:.4g}"
        )


class NestingError(GcwmError):
    """A zero-inflated fit scored below its nested Poisson fit."""


class DegenerateError(ConvergenceError):
    """A component fits its rows exactly (too little mass or zero residual variance)."""
