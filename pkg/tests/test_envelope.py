import os

import pytest
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from hypothesis import given, settings
from hypothesis import strategies as st

from kmstn import envelope as env
from kmstn.envelope import KeyMode, MessageKeyMode
from kmstn.errors import AuthFailure, EmptyInput, InvariantError
from kmstn.model import EncryptedEnvelope, KeyBlock, b64e

KID = "0b5e7c1a-9d2f-4e61-8a3b-1c2d3e4f5a6b"


def _ref_hkdf(secret, info, n=32):
    return HKDF(algorithm=hashes.SHA256(), length=n, salt=None, info=info).derive(secret)


def test_otp_zero_operand_identity():
    s = os.urandom(32)
    assert env.otp_combine(bytes(32), s) == s


def test_otp_complement():
    assert env.otp_combine(b"\xff" * 32, b"\xff" * 32) == bytes(32)


@given(st.binary(min_size=32, max_size=32), st.binary(min_size=32, max_size=32))
def test_otp_involution(k, s):
    assert env.otp_combine(env.otp_combine(k, s), s) == k


def test_otp_expands_short_kem_secret_to_qkd_key_length():
    k = os.urandom(64)
    s = os.urandom(32)
    pad = _ref_hkdf(s, b"kmstn/otp-expand", 64)
    assert env.otp_combine(k, s) == bytes(a ^ b for a, b in zip(k, pad))


def test_otp_empty_operand():
    with pytest.raises(EmptyInput):
        env.otp_combine(b"", b"x")
    with pytest.raises(EmptyInput):
        env.otp_combine(b"x", b"")


def test_derivation_matches_independent_hkdf():
    s, q = os.urandom(32), os.urandom(32)
    qkd = KeyBlock(KID, q)
    assert env.derive_message_key(MessageKeyMode(KeyMode.PQC_ONLY, s)) == _ref_hkdf(s, b"pqc-only")
    xored = bytes(a ^ b for a, b in zip(q, s))
    assert env.derive_message_key(MessageKeyMode(KeyMode.HYBRID, s, qkd)) == _ref_hkdf(xored, b"hybrid")


def test_derivation_deterministic_and_label_separated():
    s = os.urandom(32)
    qkd = KeyBlock(KID, bytes(32))
    pqc = env.derive_message_key(MessageKeyMode(KeyMode.PQC_ONLY, s))
    assert pqc == env.derive_message_key(MessageKeyMode(KeyMode.PQC_ONLY, s))
    # all-zero QKD key makes the OTP the identity, so only the label differs
    assert pqc != env.derive_message_key(MessageKeyMode(KeyMode.HYBRID, s, qkd))


def test_hybrid_avalanche_on_one_qkd_bit():
    s, q = os.urandom(32), bytearray(os.urandom(32))
    k1 = env.derive_message_key(MessageKeyMode(KeyMode.HYBRID, s, KeyBlock(KID, bytes(q))))
    q[5] ^= 0x10
    k2 = env.derive_message_key(MessageKeyMode(KeyMode.HYBRID, s, KeyBlock(KID, bytes(q))))
    assert k1 != k2


def test_hybrid_needs_qkd_key():
    with pytest.raises(InvariantError):
        MessageKeyMode(KeyMode.HYBRID, os.urandom(32))
    with pytest.raises(EmptyInput):
        MessageKeyMode(KeyMode.PQC_ONLY, b"")


@settings(max_examples=100)
@given(st.binary(max_size=512))
def test_seal_open_round_trip(pt):
    key = os.urandom(32)
    e = env.seal(pt, key, "s1")
    assert env.open_envelope(e, key) == pt


def test_seal_is_plain_aes_gcm_with_session_bound_aad():
    key = os.urandom(32)
    e = env.seal(b"hello", key, KID, "qkdsae1")
    aad = b'{"sae":"qkdsae1","session":"' + KID.encode() + b'"}'
    assert AESGCM(key).decrypt(e.iv_bytes, e.ciphertext_bytes, aad) == b"hello"


def test_two_seals_differ():
    key = os.urandom(32)
    a, b = env.seal(b"same", key, "s"), env.seal(b"same", key, "s")
    assert a.iv != b.iv and a.ciphertext != b.ciphertext


def test_empty_plaintext():
    key = os.urandom(32)
    assert env.open_envelope(env.seal(b"", key, "s"), key) == b""


def test_flipped_bit_fails():
    key = os.urandom(32)
    e = env.seal(b"payload", key, "s")
    ct = bytearray(e.ciphertext_bytes)
    ct[0] ^= 1
    with pytest.raises(AuthFailure):
        env.open_envelope(EncryptedEnvelope(e.iv, b64e(bytes(ct)), e.session), key)


def test_wrong_key_and_rebound_header_fail():
    key = os.urandom(32)
    e = env.seal(b"payload", key, KID, "qkdsae1")
    with pytest.raises(AuthFailure):
        env.open_envelope(e, os.urandom(32))
    with pytest.raises(AuthFailure):
        env.open_envelope(EncryptedEnvelope(e.iv, e.ciphertext, KID, "qkdsae9"), key)
    with pytest.raises(AuthFailure):
        env.open_envelope(EncryptedEnvelope(e.iv, e.ciphertext, KID), key)
