"""Encrypted, device-bound storage for relayed keys.

On-disk layout under ``state_dir``::

    seal.blob     master secret sealed under the device secret (or password salt)
    secrets.dat   named secrets: per-entry IV, HMAC-chained XOR ciphertext, MAC
    keystore.db   SQLite; every key row is AES-256-GCM under the store password,
                  and the key material inside is XORed with a per-key field pad
                  before that, so plaintext key bytes never reach a page or journal

No hardware TPM is driven here.  The software seal binds the store to a device
secret kept outside ``state_dir``; copying the directory to a host with a
different device secret makes it unreadable.  When no device secret can be
used, the master secret is derived from a store password supplied at startup.
"""
from __future__ import annotations

import hashlib
import hmac
import json
import logging
import os
import sqlite3
import threading
import time
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import (DuplicateKeyId, KeyNotPresent, NotFound, SealUnavailable, Unauthorized,
                     UnsealError, Voided)
from .model import KeyBlock, b64d, b64e, canonical_json

log = logging.getLogger(__name__)

SEAL_FILE = "seal.blob"
SECRETS_FILE = "secrets.dat"
DB_FILE = "keystore.db"
HARDWARE_TPM_PATHS = ("/dev/tpm0", "/dev/tpmrm0")
DEFAULT_DELIVERED_TTL_S = 24 * 3600.0
_CHAIN_BLOCK = 32


class EmulatedSealWarning(UserWarning):
    """The store is protected by a software seal rather than a hardware TPM."""


def default_device_secret_path() -> Path:
    env = os.environ.get("KMSTN_DEVICE_SECRET")
    if env:
        return Path(env)
    return Path.home() / ".local" / "share" / "kmstn" / "device-secret"


def _hkdf(secret: bytes, info: bytes, length: int = 32) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=None, info=info).derive(secret)


def _write_private(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    os.chmod(path, 0o600)


# -- device seal --------------------------------------------------------------

@dataclass
class DeviceSeal:
    state_dir: Path
    mode: str
    emulated: bool
    _master: bytearray = field(repr=False)

    def subkey(self, label: str) -> bytes:
        return _hkdf(bytes(self._master), b"kmstn/seal/" + label.encode())

    def close(self):
        for i in range(len(self._master)):
            self._master[i] = 0


def init_device_seal(state_dir, require_hardware: bool = False,
                     device_secret_path: Optional[os.PathLike] = None,
                     password: Optional[str] = None,
                     hardware_paths: Sequence[str] = HARDWARE_TPM_PATHS) -> DeviceSeal:
    """Create or load the sealed master secret for ``state_dir``.

    Fallback ladder: hardware module (required but not driven here), software
    emulation bound to a device secret, then a store password from
    configuration (``password`` or ``KMSTN_STORE_PASSWORD``).
    """
    state_dir = Path(state_dir)
    state_dir.mkdir(parents=True, exist_ok=True)
    os.chmod(state_dir, 0o700)
    hardware = [p for p in hardware_paths if os.path.exists(p)]
    if require_hardware:
        if not hardware:
            raise SealUnavailable("no hardware TPM present and require_hardware is set")
        raise SealUnavailable(f"hardware TPM at {hardware[0]} found, but only software "
                              "sealing is implemented")
    blob_path = state_dir / SEAL_FILE
    blob = json.loads(blob_path.read_bytes()) if blob_path.exists() else None

    password = password if password is not None else os.environ.get("KMSTN_STORE_PASSWORD")
    if blob is not None and blob.get("mode") == "password":
        if password is None:
            raise SealUnavailable("store is password-sealed; no store password configured")
        return _password_seal(state_dir, blob_path, blob, password)

    secret_path = Path(device_secret_path) if device_secret_path else default_device_secret_path()
    try:
        device_secret = _load_device_secret(secret_path)
    except OSError as exc:
        if password is None:
            raise SealUnavailable(f"device secret unusable ({exc}) and no store password "
                                  "configured") from None
        log.warning("device secret unusable (%s); using the configured store password", exc)
        return _password_seal(state_dir, blob_path, blob, password)

    for msg in ("no hardware TPM in use: keystore sealed with a SOFTWARE-EMULATED device secret",
                f"anyone able to read {secret_path} and {state_dir} can decrypt stored keys",
                "use a hardware TPM for production deployments"):
        log.warning(msg)
    warnings.warn(f"emulated device seal for {state_dir}", EmulatedSealWarning, stacklevel=2)

    wrap = AESGCM(_hkdf(device_secret, b"kmstn/device-seal"))
    if blob is None:
        master = os.urandom(32)
        nonce = os.urandom(12)
        sealed = wrap.encrypt(nonce, master, SEAL_FILE.encode())
        _write_private(blob_path, canonical_json(
            {"version": 1, "mode": "emulated", "nonce": b64e(nonce), "sealed": b64e(sealed)}))
    else:
        if blob.get("mode") != "emulated":
            raise UnsealError(f"unsupported seal mode {blob.get('mode')!r}")
        try:
            master = wrap.decrypt(b64d(blob["nonce"]), b64d(blob["sealed"]), SEAL_FILE.encode())
        except (InvalidTag, KeyError):
            raise UnsealError("seal.blob does not unseal under this device secret") from None
    return DeviceSeal(state_dir, "emulated", True, bytearray(master))


def _load_device_secret(path: Path) -> bytes:
    if path.exists():
        data = path.read_bytes()
        if len(data) < 32:
            raise OSError(f"device secret at {path} is too short")
        return data
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_private(path, os.urandom(32))
    return path.read_bytes()


def _password_seal(state_dir: Path, blob_path: Path, blob: Optional[dict],
                   password: str) -> DeviceSeal:
    if blob is None:
        salt = os.urandom(16)
        master = hashlib.scrypt(password.encode(), salt=salt, n=2 ** 14, r=8, p=1, dklen=32)
        check = hmac.new(master, b"check", "sha256").digest()
        _write_private(blob_path, canonical_json(
            {"version": 1, "mode": "password", "salt": b64e(salt), "check": b64e(check)}))
    else:
        if blob.get("mode") != "password":
            raise UnsealError("seal.blob was created with a device seal, not a password")
        master = hashlib.scrypt(password.encode(), salt=b64d(blob["salt"]), n=2 ** 14, r=8, p=1,
                                dklen=32)
        if not hmac.compare_digest(hmac.new(master, b"check", "sha256").digest(),
                                   b64d(blob["check"])):
            raise UnsealError("wrong store password")
    log.warning("keystore sealed with a configured password; no device binding")
    return DeviceSeal(state_dir, "password", True, bytearray(master))


# -- secrets file -------------------------------------------------------------

class SecretsFile:
    """Named secrets under the device seal, one IV and XOR chain per entry.

    Each entry is cut into 32-byte blocks; block ``i`` is XORed with
    ``HMAC(k_enc, prev)`` where ``prev`` is ``name || iv`` for the first block
    and the previous ciphertext block afterwards.  An HMAC over
    ``name || iv || ciphertext`` authenticates the entry.
    """

    def __init__(self, seal: DeviceSeal):
        self.path = seal.state_dir / SECRETS_FILE
        self._enc = seal.subkey("secrets/enc")
        self._mac = seal.subkey("secrets/mac")
        self._lock = threading.Lock()

    def _entries(self) -> dict:
        if not self.path.exists():
            return {}
        return json.loads(self.path.read_bytes())

    def _chain(self, name: bytes, iv: bytes, data: bytes, decrypt: bool) -> bytes:
        out = bytearray()
        feedback = b"\x00" + name + b"\x00" + iv
        for off in range(0, len(data), _CHAIN_BLOCK):
            block = data[off:off + _CHAIN_BLOCK]
            pad = hmac.new(self._enc, feedback, "sha256").digest()
            mixed = bytes(a ^ b for a, b in zip(block, pad))
            out += mixed
            feedback = b"\x01" + (block if decrypt else mixed)
        return bytes(out)

    def _tag(self, name: bytes, iv: bytes, ct: bytes) -> bytes:
        return hmac.new(self._mac, len(name).to_bytes(2, "big") + name + iv + ct, "sha256").digest()

    def seal_secret(self, name: str, value: bytes) -> None:
        raw_name = name.encode("utf-8")
        iv = os.urandom(16)
        ct = self._chain(raw_name, iv, bytes(value), decrypt=False)
        with self._lock:
            entries = self._entries()
            entries[name] = {"iv": b64e(iv), "ct": b64e(ct), "tag": b64e(self._tag(raw_name, iv, ct))}
            _write_private(self.path, canonical_json(entries))

    def unseal_secret(self, name: str) -> bytes:
        with self._lock:
            entry = self._entries().get(name)
        if entry is None:
            raise NotFound(f"no secret named {name!r}")
        raw_name = name.encode("utf-8")
        iv, ct = b64d(entry["iv"]), b64d(entry["ct"])
        if not hmac.compare_digest(self._tag(raw_name, iv, ct), b64d(entry["tag"])):
            raise UnsealError(f"secret {name!r} does not verify under this seal")
        return self._chain(raw_name, iv, ct, decrypt=True)

    def get_or_create(self, name: str, size: int = 32) -> bytes:
        try:
            return self.unseal_secret(name)
        except NotFound:
            value = os.urandom(size)
            self.seal_secret(name, value)
            return value

    def names(self) -> list:
        with self._lock:
            return sorted(self._entries())


# -- key store ----------------------------------------------------------------

class KeyState(str, Enum):
    AVAILABLE = "available"
    DELIVERED = "delivered"
    VOIDED = "voided"


@dataclass(frozen=True)
class StoredKey:
    key_id: str
    owner_master_sae_id: str
    target_sae_ids: Tuple[str, ...]
    field_ciphertext: bytes = field(repr=False)
    state: KeyState
    namespace: str = "relay"


_SCHEMA = """
CREATE TABLE IF NOT EXISTS meta (name TEXT PRIMARY KEY, value BLOB NOT NULL);
CREATE TABLE IF NOT EXISTS keys (
    key_id TEXT PRIMARY KEY,
    namespace TEXT NOT NULL,
    state TEXT NOT NULL,
    created REAL NOT NULL,
    delivered REAL,
    record BLOB NOT NULL
);
"""
_CANARY = b"kmstn keystore v1"


class KeyStore:
    """Relayed keys, field-encrypted and record-encrypted, with void semantics.

    In-transit keys and keys read southbound live in separate namespaces of
    the same database file.
    """

    def __init__(self, seal: DeviceSeal, delivered_ttl_s: float = DEFAULT_DELIVERED_TTL_S,
                 clock=time.time):
        self.seal = seal
        self.path = seal.state_dir / DB_FILE
        self.delivered_ttl_s = delivered_ttl_s
        self._clock = clock
        secrets = SecretsFile(seal)
        self._aead = AESGCM(_hkdf(secrets.get_or_create("keystore-password"), b"kmstn/keystore"))
        self._field = bytearray(secrets.get_or_create("field-secret"))
        self._lock = threading.RLock()
        fresh = not self.path.exists()
        self._db = sqlite3.connect(self.path, check_same_thread=False, isolation_level=None)
        os.chmod(self.path, 0o600)
        self._db.executescript(_SCHEMA)
        self._check_canary(fresh)

    # -- crypto helpers
    def _check_canary(self, fresh: bool):
        row = self._db.execute("SELECT value FROM meta WHERE name='canary'").fetchone()
        if row is None:
            if not fresh and self._db.execute("SELECT COUNT(*) FROM keys").fetchone()[0]:
                raise UnsealError("keystore has no canary")
            nonce = os.urandom(12)
            blob = nonce + self._aead.encrypt(nonce, _CANARY, b"canary")
            self._db.execute("INSERT INTO meta VALUES ('canary', ?)", (blob,))
            return
        try:
            self._aead.decrypt(row[0][:12], row[0][12:], b"canary")
        except InvalidTag:
            raise UnsealError("keystore does not open under this seal") from None

    def _pad(self, key_id: str, length: int) -> bytes:
        return _hkdf(bytes(self._field), b"kmstn/field/" + key_id.encode(), length)

    def _encrypt_record(self, key_id: str, namespace: str, payload: dict) -> bytes:
        nonce = os.urandom(12)
        aad = f"{namespace}/{key_id}".encode()
        return nonce + self._aead.encrypt(nonce, canonical_json(payload), aad)

    def _decrypt_record(self, key_id: str, namespace: str, blob: bytes) -> dict:
        aad = f"{namespace}/{key_id}".encode()
        try:
            return json.loads(self._aead.decrypt(blob[:12], blob[12:], aad))
        except InvalidTag:
            raise UnsealError(f"record {key_id} failed authentication") from None

    # -- operations
    def put_key(self, key: KeyBlock, owner: str, targets: Iterable[str],
                namespace: str = "relay") -> StoredKey:
        targets = tuple(targets)
        pad = self._pad(key.key_id, len(key.key_material))
        field_ct = bytes(a ^ b for a, b in zip(key.key_material, pad))
        record = self._encrypt_record(key.key_id, namespace, {
            "owner": owner, "targets": list(targets), "field_ct": b64e(field_ct)})
        with self._lock:
            try:
                self._db.execute(
                    "INSERT INTO keys (key_id, namespace, state, created, record) VALUES (?,?,?,?,?)",
                    (key.key_id, namespace, KeyState.AVAILABLE.value, self._clock(), record))
            except sqlite3.IntegrityError:
                raise DuplicateKeyId(f"key {key.key_id} already stored") from None
        return StoredKey(key.key_id, owner, targets, field_ct, KeyState.AVAILABLE, namespace)

    def _row(self, key_id: str):
        return self._db.execute(
            "SELECT namespace, state, delivered, record FROM keys WHERE key_id=?", (key_id,)
        ).fetchone()

    def lookup(self, key_id: str) -> StoredKey:
        with self._lock:
            row = self._row(key_id)
        if row is None:
            raise KeyNotPresent(f"key {key_id} not present")
        namespace, state, _, blob = row
        rec = self._decrypt_record(key_id, namespace, blob)
        return StoredKey(key_id, rec["owner"], tuple(rec["targets"]),
                         b64d(rec["field_ct"]) if rec.get("field_ct") else b"",
                         KeyState(state), namespace)

    def get_key(self, key_id: str, requester: str) -> KeyBlock:
        with self._lock:
            row = self._row(key_id)
            if row is None:
                raise KeyNotPresent(f"key {key_id} not present")
            namespace, state, delivered, blob = row
            if state == KeyState.VOIDED.value:
                raise Voided(f"key {key_id} has been voided")
            now = self._clock()
            if delivered is not None and now - delivered > self.delivered_ttl_s:
                self._void_locked(key_id, namespace)
                raise KeyNotPresent(f"key {key_id} expired")
            rec = self._decrypt_record(key_id, namespace, blob)
            if requester not in rec["targets"]:
                raise Unauthorized(f"{requester} is not a target of key {key_id}")
            field_ct = b64d(rec["field_ct"])
            material = bytes(a ^ b for a, b in zip(field_ct, self._pad(key_id, len(field_ct))))
            if state == KeyState.AVAILABLE.value:
                self._db.execute("UPDATE keys SET state=?, delivered=? WHERE key_id=?",
                                 (KeyState.DELIVERED.value, now, key_id))
        return KeyBlock(key_id, material)

    def void_key(self, key_id: str) -> None:
        """Void a key; voiding an already voided key is a no-op."""
        with self._lock:
            row = self._row(key_id)
            if row is None:
                raise KeyNotPresent(f"key {key_id} not present")
            if row[1] != KeyState.VOIDED.value:
                self._void_locked(key_id, row[0])

    def _void_locked(self, key_id: str, namespace: str):
        rec = self._decrypt_record(key_id, namespace, self._row(key_id)[3])
        rec.pop("field_ct", None)
        self._db.execute("UPDATE keys SET state=?, record=? WHERE key_id=?",
                         (KeyState.VOIDED.value, self._encrypt_record(key_id, namespace, rec), key_id))

    def state(self, key_id: str) -> KeyState:
        with self._lock:
            row = self._row(key_id)
        if row is None:
            raise KeyNotPresent(f"key {key_id} not present")
        return KeyState(row[1])

    def __contains__(self, key_id: str) -> bool:
        with self._lock:
            return self._row(key_id) is not None

    def count(self, state: Optional[KeyState] = None, namespace: Optional[str] = None) -> int:
        sql, args = "SELECT COUNT(*) FROM keys WHERE 1=1", []
        if state is not None:
            sql += " AND state=?"
            args.append(KeyState(state).value)
        if namespace is not None:
            sql += " AND namespace=?"
            args.append(namespace)
        with self._lock:
            return self._db.execute(sql, args).fetchone()[0]

    def key_ids(self, state: Optional[KeyState] = None) -> list:
        with self._lock:
            if state is None:
                rows = self._db.execute("SELECT key_id FROM keys ORDER BY created").fetchall()
            else:
                rows = self._db.execute("SELECT key_id FROM keys WHERE state=? ORDER BY created",
                                        (KeyState(state).value,)).fetchall()
        return [r[0] for r in rows]

    def purge_expired(self) -> int:
        cutoff = self._clock() - self.delivered_ttl_s
        with self._lock:
            rows = self._db.execute(
                "SELECT key_id, namespace FROM keys WHERE state=? AND delivered < ?",
                (KeyState.DELIVERED.value, cutoff)).fetchall()
            for key_id, ns in rows:
                self._void_locked(key_id, ns)
        return len(rows)

    def close(self):
        with self._lock:
            self._db.close()
            for i in range(len(self._field)):
                self._field[i] = 0


def open_keystore(state_dir, require_hardware: bool = False, device_secret_path=None,
                  password: Optional[str] = None, **kwargs) -> KeyStore:
    seal = init_device_seal(state_dir, require_hardware=require_hardware,
                            device_secret_path=device_secret_path, password=password)
    return KeyStore(seal, **kwargs)
