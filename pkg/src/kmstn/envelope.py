"""Application-level encryption of relay messages.

Message keys come either from a KEM secret alone (``pqc_only``) or from the
one-time-pad combination of a transport QKD key with a KEM secret
(``hybrid``).  Messages are sealed with AES-256-GCM; the 12-byte nonce goes in
the envelope ``iv`` field and the 16-byte tag is appended to the ciphertext.
The session id and owning SAE are bound as associated data.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import AuthFailure, EmptyInput, InvariantError
from .model import NONCE_LEN, EncryptedEnvelope, KeyBlock, b64e, canonical_json

KEY_LEN = 32
TAG_LEN = 16
# HKDF-SHA256 can emit at most 255 hash blocks
MAX_EXPAND = 255 * 32


class KeyMode(str, Enum):
    PQC_ONLY = "pqc_only"
    HYBRID = "hybrid"


@dataclass(frozen=True)
class MessageKeyMode:
    mode: KeyMode
    kem_secret: bytes = field(repr=False)
    qkd_key: Optional[KeyBlock] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", KeyMode(self.mode))
        if not self.kem_secret:
            raise EmptyInput("kem_secret is empty")
        if self.mode is KeyMode.HYBRID and self.qkd_key is None:
            raise InvariantError("hybrid mode requires a QKD key")


@dataclass(frozen=True)
class HybridKey:
    value: bytes = field(repr=False)
    k_ab: bytes = field(repr=False)
    kem_ab: bytes = field(repr=False)


def _hkdf(secret: bytes, length: int, info: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=None, info=info).derive(secret)


def expand_kem(kem_ab: bytes, length: int) -> bytes:
    if len(kem_ab) == length:
        return bytes(kem_ab)
    if length > MAX_EXPAND:
        raise InvariantError(f"cannot expand KEM secret beyond {MAX_EXPAND} bytes")
    return _hkdf(kem_ab, length, b"kmstn/otp-expand")


def otp_combine(k_ab: bytes, kem_ab: bytes) -> bytes:
    """XOR a QKD key with a KEM secret stretched to the QKD key's length."""
    if not k_ab or not kem_ab:
        raise EmptyInput("otp_combine needs two non-empty operands")
    pad = expand_kem(kem_ab, len(k_ab))
    return bytes(a ^ b for a, b in zip(k_ab, pad))


def hybrid_key(k_ab: bytes, kem_ab: bytes) -> HybridKey:
    return HybridKey(otp_combine(k_ab, kem_ab), bytes(k_ab), expand_kem(kem_ab, len(k_ab)))


def derive_message_key(mode: MessageKeyMode) -> bytes:
    if mode.mode is KeyMode.PQC_ONLY:
        return _hkdf(mode.kem_secret, KEY_LEN, b"pqc-only")
    combined = otp_combine(mode.qkd_key.key_material, mode.kem_secret)
    return _hkdf(combined, KEY_LEN, b"hybrid")


def _aad(session: str, sae: Optional[str]) -> bytes:
    return canonical_json({"session": session, "sae": sae})


def seal(plaintext: bytes, key: bytes, session: str, sae: Optional[str] = None) -> EncryptedEnvelope:
    if len(key) != KEY_LEN:
        raise InvariantError("message key must be 32 bytes")
    nonce = os.urandom(NONCE_LEN)
    ct = AESGCM(key).encrypt(nonce, bytes(plaintext), _aad(session, sae))
    return EncryptedEnvelope(iv=b64e(nonce), ciphertext=b64e(ct), session=session, sae=sae)


def open_envelope(envelope: EncryptedEnvelope, key: bytes) -> bytes:
    if len(key) != KEY_LEN:
        raise AuthFailure("message key must be 32 bytes")
    try:
        return AESGCM(key).decrypt(envelope.iv_bytes, envelope.ciphertext_bytes,
                                   _aad(envelope.session, envelope.sae))
    except InvalidTag:
        raise AuthFailure(f"authentication failed for session {envelope.session}") from None


open = open_envelope  # noqa: A001  mirrors seal/open naming
