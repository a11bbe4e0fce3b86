"""Exception types raised by the estimation machinery.

Everything here derives from :class:`UbmcmcError` so callers can catch the
package's failures with one except clause while still being able to tell a
numerical pathology (e.g. a coupling that stopped producing meetings) from a
plain configuration mistake.
"""


class UbmcmcError(Exception):
    """Base class for all package-specific errors."""


class LevelTooLargeError(UbmcmcError):
    """Mesh width underflowed: the requested level is not representable."""


class LevelCapExceededError(UbmcmcError):
    """The randomized level sampler drew a level beyond the configured cap."""


class CouplingStallError(UbmcmcError):
    """A rejection loop inside a coupling exceeded its iteration cap."""


class InvalidCurrentStateError(UbmcmcError):
    """A Markov chain found itself at a state of zero target density."""


class GradientUnavailableError(UbmcmcError):
    """The target does not implement state gradients (required for HMC)."""


class ScoreUnavailableError(UbmcmcError):
    """The target does not implement a parameter score function."""


class InitializationError(UbmcmcError):
    """Could not draw an in-support initial state within the retry cap."""


class NonMeetingError(UbmcmcError):
    """Coupled chains failed to meet within the configured step cap."""


class IntegratorError(UbmcmcError):
    """The ODE integrator produced an invalid (blown-up) trajectory."""


class ConfigError(UbmcmcError):
    """An experiment configuration failed validation."""
