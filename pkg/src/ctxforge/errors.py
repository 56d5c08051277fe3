"""Exception hierarchy and the CLI exit-code mapping."""

from __future__ import annotations


class CtxforgeError(Exception):
    """Base class for all ctxforge errors."""

    exit_code = 1
    code = "error"


class ConfigError(CtxforgeError):
    """Invalid or inconsistent configuration, caught before any work starts."""

    exit_code = 2
    code = "config"


class DataError(CtxforgeError):
    """Broken dataset content: missing files, malformed XML, invalid boxes."""

    exit_code = 3
    code = "data"


class ServiceError(CtxforgeError):
    """Remote integration service unreachable or misbehaving."""

    exit_code = 4
    code = "service"


class ProtocolError(ServiceError):
    """The service answered, but the response violates the wire contract."""

    code = "protocol"
