"""Exception hierarchy shared by the simulators and the CLI.

Each family maps onto one CLI exit code (see ``pairsed.cli``).
"""


class PairsedError(Exception):
    """Base class for every error raised on purpose by this package."""


class DegenerateInputError(PairsedError, ValueError):
    """Kernel evaluated at the origin or with non-finite components."""


class InvalidSpecError(PairsedError, ValueError):
    """Malformed parameter object (cutoff radii, blob width, density spec...)."""


class OverlapError(PairsedError, ValueError):
    """A pair orientation with |xi| <= 1, i.e. the two spheres overlap."""

    def __init__(self, message, pairs=None):
        super().__init__(message)
        self.pairs = pairs


class NearFieldError(PairsedError, ValueError):
    """Far-field pair representation evaluated inside its validity radius."""

    def __init__(self, message, pairs=None):
        super().__init__(message)
        self.pairs = pairs


class BlowUpError(PairsedError, FloatingPointError):
    """State became non-finite during time stepping."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class NonConvergenceError(PairsedError, RuntimeError):
    """An iterative solver (reflections, Picard) failed to contract."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class DomainExitError(PairsedError, RuntimeError):
    """A characteristic foot point left the grid carrying the F field."""


class ConfigError(PairsedError, ValueError):
    """Unparseable or invalid experiment configuration."""

    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line
