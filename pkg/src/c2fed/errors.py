"""Exception hierarchy shared by every module."""


class C2FedError(Exception):
    """Base class for all package errors."""


class InvalidInputError(C2FedError, ValueError):
    pass


class ShapeError(C2FedError, ValueError):
    pass


class ConfigError(C2FedError, ValueError):
    pass


class GenerationError(C2FedError, RuntimeError):
    pass


class OracleFailure(C2FedError, ArithmeticError):
    pass


class ProtocolError(C2FedError, RuntimeError):
    pass


class MergeError(C2FedError, ValueError):
    pass


class RoutingError(C2FedError, LookupError):
    pass


class ClientTimeout(C2FedError, TimeoutError):
    pass
