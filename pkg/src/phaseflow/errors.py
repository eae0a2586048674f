"""Exception types shared across the package."""


class PhaseflowError(Exception):
    """Base class for errors raised by this package."""


class DimensionMismatch(PhaseflowError):
    """Array shapes disagree with the system's particle count or dimensions."""


class UnsupportedSystemError(PhaseflowError):
    """Operation is not defined for this system variant."""


class DegenerateStateError(PhaseflowError):
    """State violates a precondition: zero kinetic energy, coincident
    particles under an unsoftened potential, singular geometry."""


class RejectionBudgetError(PhaseflowError):
    """Rejection sampler exhausted its proposal budget before filling the
    requested sample count."""


class TimestepRangeError(PhaseflowError):
    """Requested timestep lies outside the range a model was trained for."""


class NumericAbort(PhaseflowError):
    """A non-finite value surfaced mid-run; the job stopped on purpose."""


class ConfigError(PhaseflowError):
    """Config file or command-line flags are invalid or inconsistent."""


class FileFormatError(PhaseflowError):
    """A binary artifact file fails magic/version/length validation."""
