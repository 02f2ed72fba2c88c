"""Exception types shared across the package."""


class GrassError(Exception):
    pass


class InvalidInputError(GrassError, ValueError):
    """Rejected input: bad shape, out-of-range count, malformed distribution."""


class StateError(GrassError, RuntimeError):
    """An operation was called in a state that cannot support it."""


class ProtocolError(GrassError, RuntimeError):
    """The distributed simulator detected an inconsistency between workers."""


class ReconciliationError(GrassError, AssertionError):
    """Measured operation counts disagree with the analytic cost tables."""


class ConfigError(GrassError, ValueError):
    pass
