"""Exception hierarchy shared by the library, the HTTP services and the clients.

Every error carries a stable ``code`` string that travels over HTTP in the
``error`` field of the JSON error body, so the client can rebuild the same
exception type on its side.
"""
from __future__ import annotations

from typing import Dict, Optional, Type


class KmstnError(Exception):
    code = "internal"
    http_status = 500

    def __init__(self, message: str = "", details: Optional[dict] = None):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.details = details or {}

    def to_body(self) -> dict:
        body = {"error": self.code, "message": self.message}
        if self.details:
            body["details"] = self.details
        return body


_REGISTRY: Dict[str, Type[KmstnError]] = {}


def _register(cls: Type[KmstnError]) -> Type[KmstnError]:
    _REGISTRY[cls.code] = cls
    return cls


def from_body(status: int, body: dict) -> KmstnError:
    """Rebuild an exception from an HTTP error body."""
    cls = _REGISTRY.get(body.get("error", ""), KmstnError)
    if cls is MandatoryExtensionError:
        details = body.get("details") or {}
        return cls(details.get("unsupported", []), body.get("message", ""))
    err = cls(body.get("message", ""), body.get("details"))
    if cls is KmstnError:
        err.http_status = status
    return err


# wire / model
@_register
class ParseError(KmstnError):
    code = "parse_error"
    http_status = 400


@_register
class InvariantError(KmstnError):
    code = "invariant_error"
    http_status = 400


@_register
class MandatoryExtensionError(KmstnError):
    code = "mandatory_extension"
    http_status = 400

    def __init__(self, names, message: str = ""):
        names = sorted(names)
        super().__init__(message or f"unsupported mandatory extensions: {names}",
                         {"unsupported": names})
        self.names = names


# KEM channel
@_register
class BindError(KmstnError):
    code = "bind_error"


@_register
class ConnectError(KmstnError):
    code = "connect_error"
    http_status = 502


@_register
class ProtocolError(KmstnError):
    code = "protocol_error"
    http_status = 502


@_register
class NotFound(KmstnError):
    code = "not_found"
    http_status = 404


@_register
class AlreadyConsumed(KmstnError):
    code = "already_consumed"
    http_status = 409


# envelope
@_register
class EmptyInput(KmstnError):
    code = "empty_input"
    http_status = 400


@_register
class AuthFailure(KmstnError):
    code = "auth_failure"
    http_status = 400


# keystore
@_register
class SealUnavailable(KmstnError):
    code = "seal_unavailable"


@_register
class UnsealError(KmstnError):
    code = "unseal_error"


@_register
class DuplicateKeyId(KmstnError):
    code = "duplicate_key_id"
    http_status = 409


@_register
class KeyNotPresent(KmstnError):
    code = "key_not_present"
    http_status = 404


@_register
class Voided(KmstnError):
    code = "voided"
    http_status = 410


@_register
class Unauthorized(KmstnError):
    code = "unauthorized"
    http_status = 401


# topology / routing
@_register
class ConfigError(KmstnError):
    code = "config_error"


@_register
class Unreachable(KmstnError):
    code = "unreachable"
    http_status = 502


@_register
class UnknownSae(KmstnError):
    code = "unknown_sae"
    http_status = 404


@_register
class AmbiguousBinding(KmstnError):
    code = "ambiguous_binding"
    http_status = 409


# QKD / relay
@_register
class Depleted(KmstnError):
    code = "depleted"
    http_status = 503


@_register
class HopDepleted(Depleted):
    code = "hop_depleted"


@_register
class PeerUnreachable(Unreachable):
    code = "peer_unreachable"


# bench
class AbortedRun(KmstnError):
    code = "aborted_run"


class InsufficientData(KmstnError):
    code = "insufficient_data"
