"""Exception types raised across the package."""


class FedGenError(Exception):
    """Base class for all package errors."""


class ShapeError(FedGenError, ValueError):
    """Operands do not have conforming shapes."""


class DomainError(FedGenError, ValueError):
    """An argument lies outside the domain of an operation."""


class ConfigError(FedGenError, ValueError):
    """Invalid configuration.

    ``problems`` lists every violated field so callers can report all of
    them at once.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class PartitionError(FedGenError):
    """A corpus cannot be split under the requested constraints."""


class ProtocolError(FedGenError):
    """The federation protocol reached an invalid state."""


class CheckpointError(FedGenError):
    """A serialized artifact is malformed or inconsistent."""
