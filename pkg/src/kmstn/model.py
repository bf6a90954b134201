"""Identifiers, key containers and relay messages, with their JSON wire codec.

All encodings are canonical JSON (sorted keys, no whitespace, UTF-8) so that
encode/decode is a bijection and golden files compare byte for byte.  Byte
fields travel as padded RFC 4648 base64.  Field names of the relay messages
follow the ETSI GS QKD 020 draft loosely; every relay message carries
``"version": "v1"``.
"""
from __future__ import annotations

import base64
import binascii
import json
import uuid
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Optional, Sequence, Tuple
from urllib.parse import urlsplit

from .errors import InvariantError, MandatoryExtensionError, ParseError

WIRE_VERSION = "v1"
NONCE_LEN = 12
MAX_ID_LEN = 256

SaeId = str
KmeId = str


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def b64e(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64d(text: str, what: str = "field", canonical: bool = True) -> bytes:
    if not isinstance(text, str):
        raise InvariantError(f"{what}: expected base64 string")
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, UnicodeEncodeError) as exc:
        raise InvariantError(f"{what}: invalid base64 ({exc})") from None
    # only the canonical spelling is accepted, otherwise decode/encode would not be a bijection
    if canonical and b64e(raw) != text:
        raise InvariantError(f"{what}: non-canonical base64")
    return raw


def check_id(value: Any, what: str = "identifier") -> str:
    if not isinstance(value, str) or not value or len(value) > MAX_ID_LEN:
        raise InvariantError(f"{what} must be a non-empty string of at most {MAX_ID_LEN} chars")
    return value


def check_uuid(value: Any, what: str = "key_ID") -> str:
    if not isinstance(value, str):
        raise InvariantError(f"{what} must be a UUID string")
    try:
        parsed = uuid.UUID(value)
    except ValueError:
        raise InvariantError(f"{what} is not a UUID: {value!r}") from None
    if str(parsed) != value:
        raise InvariantError(f"{what} is not in canonical UUID form: {value!r}")
    return value


def check_url(value: Any, what: str = "url") -> str:
    if not isinstance(value, str):
        raise InvariantError(f"{what} must be a string")
    parts = urlsplit(value)
    if parts.scheme not in ("http", "https") or not parts.hostname:
        raise InvariantError(f"{what} is not a valid http(s) URL: {value!r}")
    try:
        parts.port
    except ValueError:
        raise InvariantError(f"{what} has an invalid port: {value!r}") from None
    return value


def new_key_id() -> str:
    return str(uuid.uuid4())


@dataclass(frozen=True)
class KeyBlock:
    key_id: str
    key_material: bytes = field(repr=False)
    size_bits: int = 0

    def __post_init__(self):
        check_uuid(self.key_id)
        if not isinstance(self.key_material, (bytes, bytearray)) or not self.key_material:
            raise InvariantError("key_material must be non-empty bytes")
        if isinstance(self.key_material, bytearray):
            object.__setattr__(self, "key_material", bytes(self.key_material))
        if not self.size_bits:
            object.__setattr__(self, "size_bits", len(self.key_material) * 8)
        if self.size_bits <= 0 or self.size_bits != len(self.key_material) * 8:
            raise InvariantError("size_bits must equal 8 * len(key_material)")

    def to_wire(self) -> dict:
        return {"key_ID": self.key_id, "key": b64e(self.key_material)}

    @classmethod
    def from_wire(cls, obj: Any) -> "KeyBlock":
        _require_fields(obj, {"key_ID", "key"}, what="key")
        return cls(check_uuid(obj["key_ID"]), b64d(obj["key"], "key"))


@dataclass(frozen=True)
class KeyContainer:
    """ETSI 014 style ``{"keys": [{"key_ID", "key"}]}`` body."""

    keys: Tuple[KeyBlock, ...]

    def __post_init__(self):
        object.__setattr__(self, "keys", tuple(self.keys))

    @property
    def key_ids(self) -> list:
        return [k.key_id for k in self.keys]

    def to_wire(self) -> dict:
        return {"keys": [k.to_wire() for k in self.keys]}

    @classmethod
    def from_wire(cls, obj: Any) -> "KeyContainer":
        _require_fields(obj, {"keys"}, what="key container")
        if not isinstance(obj["keys"], list):
            raise InvariantError("keys must be a list")
        return cls(tuple(KeyBlock.from_wire(k) for k in obj["keys"]))


class AckStatus(str, Enum):
    RELAYED = "relayed"
    VOIDED = "voided"
    FAILED = "failed"
    KEY_NOT_PRESENT = "key_not_present"


@dataclass(frozen=True)
class ExtKeyContainer:
    keys: Tuple[KeyBlock, ...]
    owner_master_sae_id: SaeId
    target_sae_ids: Tuple[SaeId, ...]
    ack_callback_url: str
    extension_mandatory: Tuple[Mapping[str, Any], ...] = ()
    extension_optional: Tuple[Mapping[str, Any], ...] = ()

    def __post_init__(self):
        for name in ("keys", "target_sae_ids", "extension_mandatory", "extension_optional"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.keys:
            raise InvariantError("keys must be non-empty")
        check_id(self.owner_master_sae_id, "owner_master_sae_id")
        if not self.target_sae_ids:
            raise InvariantError("target_sae_ids must be non-empty")
        for sae in self.target_sae_ids:
            check_id(sae, "target_sae_id")
        check_url(self.ack_callback_url, "ack_callback_url")
        for rec in self.extension_mandatory + self.extension_optional:
            if not isinstance(rec, Mapping):
                raise InvariantError("extension records must be JSON objects")

    def to_wire(self) -> dict:
        return {
            "version": WIRE_VERSION,
            "keys": [k.to_wire() for k in self.keys],
            "owner_master_sae_id": self.owner_master_sae_id,
            "target_sae_ids": list(self.target_sae_ids),
            "ack_callback_url": self.ack_callback_url,
            "extension_mandatory": [dict(r) for r in self.extension_mandatory],
            "extension_optional": [dict(r) for r in self.extension_optional],
        }

    @classmethod
    def from_wire(cls, obj: Any) -> "ExtKeyContainer":
        _require_fields(obj, {"version", "keys", "owner_master_sae_id", "target_sae_ids",
                              "ack_callback_url", "extension_mandatory", "extension_optional"},
                        what="ext key container")
        _check_version(obj)
        for name in ("keys", "target_sae_ids", "extension_mandatory", "extension_optional"):
            if not isinstance(obj[name], list):
                raise InvariantError(f"{name} must be a list")
        return cls(
            keys=tuple(KeyBlock.from_wire(k) for k in obj["keys"]),
            owner_master_sae_id=obj["owner_master_sae_id"],
            target_sae_ids=tuple(obj["target_sae_ids"]),
            ack_callback_url=obj["ack_callback_url"],
            extension_mandatory=tuple(obj["extension_mandatory"]),
            extension_optional=tuple(obj["extension_optional"]),
        )


@dataclass(frozen=True)
class AckContainer:
    key_ids: Tuple[str, ...]
    ack_status: AckStatus
    initiator_sae_id: SaeId
    message: Optional[Mapping[str, Any]] = None

    def __post_init__(self):
        object.__setattr__(self, "key_ids", tuple(self.key_ids))
        if not self.key_ids:
            raise InvariantError("key_ids must be non-empty")
        for kid in self.key_ids:
            check_uuid(kid, "key_id")
        try:
            object.__setattr__(self, "ack_status", AckStatus(self.ack_status))
        except ValueError:
            raise InvariantError(f"invalid ack_status {self.ack_status!r}") from None
        check_id(self.initiator_sae_id, "initiator_sae_id")
        if self.message is not None and not isinstance(self.message, Mapping):
            raise InvariantError("message must be a JSON object")

    def to_wire(self) -> dict:
        out = {
            "key_ids": list(self.key_ids),
            "ack_status": self.ack_status.value,
            "initiator_sae_id": self.initiator_sae_id,
        }
        if self.message is not None:
            out["message"] = dict(self.message)
        return out

    @classmethod
    def from_wire(cls, obj: Any) -> "AckContainer":
        _require_fields(obj, {"key_ids", "ack_status", "initiator_sae_id"}, {"message"},
                        what="ack container")
        if not isinstance(obj["key_ids"], list):
            raise InvariantError("key_ids must be a list")
        if not isinstance(obj["ack_status"], str):
            raise InvariantError("ack_status must be a string")
        return cls(tuple(obj["key_ids"]), obj["ack_status"], obj["initiator_sae_id"],
                   obj.get("message"))


@dataclass(frozen=True)
class VoidRequest:
    key_ids: Tuple[str, ...]
    initiator_sae_id: SaeId
    ack_callback_url: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "key_ids", tuple(self.key_ids))
        if not self.key_ids:
            raise InvariantError("key_ids must be non-empty")
        for kid in self.key_ids:
            check_uuid(kid, "key_id")
        check_id(self.initiator_sae_id, "initiator_sae_id")
        if self.ack_callback_url is not None:
            check_url(self.ack_callback_url, "ack_callback_url")

    def to_wire(self) -> dict:
        out = {"version": WIRE_VERSION, "key_ids": list(self.key_ids),
               "initiator_sae_id": self.initiator_sae_id}
        if self.ack_callback_url is not None:
            out["ack_callback_url"] = self.ack_callback_url
        return out

    @classmethod
    def from_wire(cls, obj: Any) -> "VoidRequest":
        _require_fields(obj, {"version", "key_ids", "initiator_sae_id"}, {"ack_callback_url"},
                        what="void request")
        _check_version(obj)
        if not isinstance(obj["key_ids"], list):
            raise InvariantError("key_ids must be a list")
        return cls(tuple(obj["key_ids"]), obj["initiator_sae_id"], obj.get("ack_callback_url"))


@dataclass(frozen=True)
class EncryptedEnvelope:
    iv: str
    ciphertext: str
    session: str
    sae: Optional[SaeId] = None

    def __post_init__(self):
        # envelopes keep their base64 text verbatim, so any valid spelling round-trips
        if len(b64d(self.iv, "iv", canonical=False)) != NONCE_LEN:
            raise InvariantError(f"iv must decode to {NONCE_LEN} bytes")
        b64d(self.ciphertext, "ciphertext", canonical=False)
        check_id(self.session, "session")
        if self.sae is not None:
            check_id(self.sae, "sae")
            # hybrid sessions are named by the transport QKD key
            check_uuid(self.session, "session")

    @property
    def iv_bytes(self) -> bytes:
        return base64.b64decode(self.iv)

    @property
    def ciphertext_bytes(self) -> bytes:
        return base64.b64decode(self.ciphertext)

    def to_wire(self) -> dict:
        out = {"iv": self.iv, "ciphertext": self.ciphertext, "session": self.session}
        if self.sae is not None:
            out["sae"] = self.sae
        return out

    @classmethod
    def from_wire(cls, obj: Any) -> "EncryptedEnvelope":
        _require_fields(obj, {"iv", "ciphertext", "session"}, {"sae"}, what="envelope")
        return cls(obj["iv"], obj["ciphertext"], obj["session"], obj.get("sae"))


def _require_fields(obj: Any, required: set, optional: Iterable[str] = (), what: str = "object"):
    if not isinstance(obj, dict):
        raise InvariantError(f"{what} must be a JSON object")
    missing = required - obj.keys()
    if missing:
        raise InvariantError(f"{what}: missing fields {sorted(missing)}")
    extra = obj.keys() - required - set(optional)
    if extra:
        raise InvariantError(f"{what}: unexpected fields {sorted(extra)}")


def _check_version(obj: dict):
    if obj["version"] != WIRE_VERSION:
        raise InvariantError(f"unsupported wire version {obj['version']!r}")


def _parse(data: bytes) -> Any:
    if not isinstance(data, (bytes, bytearray)) or not data:
        raise ParseError("empty input")
    try:
        return json.loads(bytes(data).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"malformed JSON: {exc}") from None


def encode_envelope(envelope: EncryptedEnvelope) -> bytes:
    return canonical_json(envelope.to_wire())


def decode_envelope(data: bytes) -> EncryptedEnvelope:
    return EncryptedEnvelope.from_wire(_parse(data))


def encode_ext_keys(container: ExtKeyContainer) -> bytes:
    return canonical_json(container.to_wire())


def decode_ext_keys(data: bytes) -> ExtKeyContainer:
    return ExtKeyContainer.from_wire(_parse(data))


def encode_ack(ack: AckContainer) -> bytes:
    return canonical_json(ack.to_wire())


def decode_ack(data: bytes) -> AckContainer:
    return AckContainer.from_wire(_parse(data))


def encode_ack_containers(acks: Sequence[AckContainer]) -> bytes:
    return canonical_json({"version": WIRE_VERSION, "ack_containers": [a.to_wire() for a in acks]})


def decode_ack_containers(data: bytes) -> Tuple[AckContainer, ...]:
    obj = _parse(data)
    _require_fields(obj, {"version", "ack_containers"}, what="ack_containers")
    _check_version(obj)
    if not isinstance(obj["ack_containers"], list) or not obj["ack_containers"]:
        raise InvariantError("ack_containers must be a non-empty list")
    return tuple(AckContainer.from_wire(a) for a in obj["ack_containers"])


def encode_key_container(container: KeyContainer) -> bytes:
    return canonical_json(container.to_wire())


def decode_key_container(data: bytes) -> KeyContainer:
    return KeyContainer.from_wire(_parse(data))


def encode_void_request(req: VoidRequest) -> bytes:
    return canonical_json(req.to_wire())


def decode_void_request(data: bytes) -> VoidRequest:
    return VoidRequest.from_wire(_parse(data))


def extension_names(records: Iterable[Mapping[str, Any]]) -> set:
    names = set()
    for rec in records:
        names.update(rec.keys())
    return names


def validate_extensions(container: ExtKeyContainer, supported: Iterable[str] = ()) -> None:
    """Raise MandatoryExtensionError if any mandatory extension is unsupported.

    Optional extensions are ignored whatever their names.
    """
    unsupported = extension_names(container.extension_mandatory) - set(supported)
    if unsupported:
        raise MandatoryExtensionError(unsupported)
