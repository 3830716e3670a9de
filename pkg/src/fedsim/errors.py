"""Exception hierarchy.

The CLI maps ``ConfigError`` to exit code 2 and ``DivergenceError`` to exit code 3.
"""


class FedSimError(Exception):
    """Base class for all simulator errors."""


class UsageError(FedSimError, ValueError):
    """Bad arguments to a library call (empty input, out-of-range value)."""


class LayoutError(FedSimError, ValueError):
    """Two parameter vectors with different layouts were combined."""


class DataError(FedSimError, ValueError):
    """Malformed data, e.g. a label outside {0, 1, 2, 3} or a zero step count."""


class StateError(FedSimError, RuntimeError):
    """An object is in a state where the operation cannot proceed."""


class ConfigError(FedSimError, ValueError):
    """Invalid experiment configuration."""


class RoundError(FedSimError, RuntimeError):
    """A federated round could not be completed."""


class DivergenceError(RoundError):
    """Local training produced a non-finite or exploding loss."""

    def __init__(self, message, collaborator_id=None, round_idx=None):
        super().__init__(message)
        self.collaborator_id = collaborator_id
        self.round_idx = round_idx
