"""Exception types shared across the engine."""


class CrosswayError(Exception):
    """Base class for engine errors."""


class InputError(CrosswayError):
    """Invalid argument (bad lane id, malformed config, ...)."""


class InfeasibleEntryError(CrosswayError):
    """A solve request whose initial state already violates its constraints.

    Signals a malformed scenario: well-formed streams admit robots only in
    states from which a stopping trajectory exists.
    """


class StateExplosionError(CrosswayError):
    """The exact-DP solver frontier exceeded its configured cap."""


class TooLargeError(CrosswayError):
    """Exhaustive enumeration requested above the configured instance cap."""
