"""ML-KEM secret exchange over a raw TCP socket.

Wire framing, all integers big-endian::

    u32  length of the rest of the frame
    u8   kind
    u16  length of session_id
    ...  session_id (UTF-8)
    ...  payload

One exchange per connection::

    initiator                          responder
    PUBLIC_KEY_REQUEST  "REQUEST_PUBLIC_KEY" ->
                      <- PUBLIC_KEY_REPLY  fresh encapsulation key
    CIPHERTEXT          ciphertext       ->
                      <- CONFIRM           (secret stored under session_id)

Any protocol violation is answered with an ERROR frame carrying a UTF-8
reason, after which the responder closes the connection.
"""
from __future__ import annotations

import enum
import logging
import socket
import socketserver
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

from cryptography.hazmat.primitives.asymmetric import mlkem

from .errors import AlreadyConsumed, BindError, ConnectError, NotFound, ProtocolError

log = logging.getLogger(__name__)

REQUEST_PUBLIC_KEY = b"REQUEST_PUBLIC_KEY"
SHARED_SECRET_LEN = 32
MAX_FRAME = 1 << 16
DEFAULT_TTL_S = 300.0
DEFAULT_PARAMS = "ML-KEM-768"

Address = Tuple[str, int]


class FrameKind(enum.IntEnum):
    PUBLIC_KEY_REQUEST = 1
    PUBLIC_KEY_REPLY = 2
    CIPHERTEXT = 3
    CONFIRM = 4
    ERROR = 0x7F


class Role(str, enum.Enum):
    INITIATOR = "initiator"
    RESPONDER = "responder"


@dataclass(frozen=True)
class KemWireMessage:
    kind: FrameKind
    session_id: str
    payload: bytes = b""

    def encode(self) -> bytes:
        sid = self.session_id.encode("utf-8")
        body = struct.pack(">BH", int(self.kind), len(sid)) + sid + self.payload
        return struct.pack(">I", len(body)) + body

    @classmethod
    def decode_body(cls, body: bytes) -> "KemWireMessage":
        if len(body) < 3:
            raise ProtocolError("short frame")
        kind, sid_len = struct.unpack(">BH", body[:3])
        if len(body) < 3 + sid_len:
            raise ProtocolError("truncated session id")
        try:
            kind = FrameKind(kind)
            sid = body[3:3 + sid_len].decode("utf-8")
        except (ValueError, UnicodeDecodeError):
            raise ProtocolError("bad frame header") from None
        return cls(kind, sid, body[3 + sid_len:])


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> KemWireMessage:
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    if length > MAX_FRAME:
        raise ProtocolError("frame too large")
    return KemWireMessage.decode_body(_recv_exact(sock, length))


def send_frame(sock: socket.socket, msg: KemWireMessage) -> None:
    sock.sendall(msg.encode())


# -- parameter sets -----------------------------------------------------------

class KemSuite:
    """Thin adapter over an ML-KEM implementation."""

    def __init__(self, name: str, generate: Callable, encaps: Callable, decaps: Callable):
        self.name = name
        self._generate = generate
        self._encaps = encaps
        self._decaps = decaps

    def generate(self):
        """Return (decapsulation handle, encapsulation key bytes)."""
        return self._generate()

    def encapsulate(self, public_key: bytes) -> Tuple[bytes, bytes]:
        """Return (shared secret, ciphertext)."""
        try:
            return self._encaps(public_key)
        except Exception as exc:
            raise ProtocolError(f"invalid public key: {exc}") from None

    def decapsulate(self, private, ciphertext: bytes) -> bytes:
        try:
            return self._decaps(private, ciphertext)
        except Exception as exc:
            raise ProtocolError(f"invalid ciphertext: {exc}") from None


def _crypto_suite(name: str, priv_cls, pub_cls) -> KemSuite:
    def generate():
        sk = priv_cls.generate()
        return sk, sk.public_key().public_bytes_raw()

    def encaps(pk: bytes):
        return pub_cls.from_public_bytes(pk).encapsulate()

    def decaps(sk, ct: bytes):
        return sk.decapsulate(ct)

    return KemSuite(name, generate, encaps, decaps)


def _kyber_py_512() -> KemSuite:
    try:
        from kyber_py.ml_kem import ML_KEM_512
    except ImportError:  # pragma: no cover - optional dependency
        raise ValueError("ML-KEM-512 needs the optional 'kyber-py' package") from None

    def generate():
        ek, dk = ML_KEM_512.keygen()
        return dk, ek

    def encaps(pk: bytes):
        if len(pk) != 800:
            raise ValueError("wrong encapsulation key length")
        return ML_KEM_512.encaps(pk)

    def decaps(dk, ct: bytes):
        if len(ct) != 768:
            raise ValueError("wrong ciphertext length")
        return ML_KEM_512.decaps(dk, ct)

    return KemSuite("ML-KEM-512", generate, encaps, decaps)


def get_suite(name: str = DEFAULT_PARAMS) -> KemSuite:
    if name == "ML-KEM-768":
        return _crypto_suite(name, mlkem.MLKEM768PrivateKey, mlkem.MLKEM768PublicKey)
    if name == "ML-KEM-1024":
        return _crypto_suite(name, mlkem.MLKEM1024PrivateKey, mlkem.MLKEM1024PublicKey)
    if name == "ML-KEM-512":
        return _kyber_py_512()
    raise ValueError(f"unknown KEM parameter set {name!r}")


# -- session registry ---------------------------------------------------------

@dataclass
class KemSession:
    session_id: str
    shared_secret: bytearray = field(repr=False)
    role: Role
    created_at: float
    consumed: bool = False


class SessionRegistry:
    """Thread-safe map of session id -> shared secret with consume-on-read."""

    def __init__(self, ttl_s: float = DEFAULT_TTL_S, clock: Callable[[], float] = time.monotonic,
                 max_tombstones: int = 1_000_000):
        self.ttl_s = ttl_s
        self._clock = clock
        self._lock = threading.Lock()
        self._live: "OrderedDict[str, KemSession]" = OrderedDict()
        self._consumed: "OrderedDict[str, float]" = OrderedDict()
        self._max_tombstones = max_tombstones

    def store(self, session_id: str, secret: bytes, role: Role) -> KemSession:
        if len(secret) != SHARED_SECRET_LEN:
            raise ProtocolError("shared secret has the wrong length")
        now = self._clock()
        with self._lock:
            self._purge_locked(now)
            if session_id in self._live or session_id in self._consumed:
                raise ProtocolError(f"session {session_id!r} already exists")
            sess = KemSession(session_id, bytearray(secret), Role(role), now)
            self._live[session_id] = sess
            return sess

    def lookup_secret(self, session_id: str) -> bytes:
        now = self._clock()
        with self._lock:
            self._purge_locked(now)
            sess = self._live.pop(session_id, None)
            if sess is None:
                if session_id in self._consumed:
                    raise AlreadyConsumed(f"session {session_id!r} already consumed")
                raise NotFound(f"unknown session {session_id!r}")
            secret = bytes(sess.shared_secret)
            _zeroize(sess.shared_secret)
            sess.consumed = True
            self._tombstone_locked(session_id, now)
            return secret

    def __contains__(self, session_id: str) -> bool:
        with self._lock:
            return session_id in self._live

    def __len__(self) -> int:
        with self._lock:
            return len(self._live)

    def purge_expired(self) -> int:
        with self._lock:
            return self._purge_locked(self._clock())

    def _purge_locked(self, now: float) -> int:
        n = 0
        while self._live:
            sid, sess = next(iter(self._live.items()))
            if now - sess.created_at < self.ttl_s:
                break
            del self._live[sid]
            _zeroize(sess.shared_secret)
            self._tombstone_locked(sid, now)
            n += 1
        return n

    def _tombstone_locked(self, sid: str, now: float):
        self._consumed[sid] = now
        while len(self._consumed) > self._max_tombstones:
            self._consumed.popitem(last=False)


def _zeroize(buf: bytearray) -> None:
    for i in range(len(buf)):
        buf[i] = 0


# -- responder ----------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    server: "KemServer"

    def handle(self):
        sock: socket.socket = self.request
        sock.settimeout(self.server.io_timeout)
        try:
            self._exchange(sock)
        except ProtocolError as exc:
            self._error(sock, "", str(exc))
        except OSError as exc:
            log.debug("kem connection error: %s", exc)

    def _error(self, sock, sid: str, reason: str):
        try:
            send_frame(sock, KemWireMessage(FrameKind.ERROR, sid, reason.encode()))
        except OSError:
            pass

    def _exchange(self, sock):
        first = read_frame(sock)
        if first.kind is FrameKind.CIPHERTEXT:
            return self._error(sock, first.session_id, "unknown session")
        if first.kind is not FrameKind.PUBLIC_KEY_REQUEST:
            return self._error(sock, first.session_id, "unexpected frame")
        if first.payload != REQUEST_PUBLIC_KEY:
            return self._error(sock, first.session_id, "bad request")
        sid = first.session_id
        if not sid:
            return self._error(sock, sid, "bad request")
        suite = self.server.suite
        private, public = suite.generate()
        send_frame(sock, KemWireMessage(FrameKind.PUBLIC_KEY_REPLY, sid, public))
        second = read_frame(sock)
        if second.kind is not FrameKind.CIPHERTEXT:
            return self._error(sock, second.session_id, "unexpected frame")
        if second.session_id != sid:
            return self._error(sock, second.session_id, "unknown session")
        secret = suite.decapsulate(private, second.payload)
        try:
            self.server.registry.store(sid, secret, Role.RESPONDER)
        except ProtocolError as exc:
            return self._error(sock, sid, str(exc))
        send_frame(sock, KemWireMessage(FrameKind.CONFIRM, sid))


class KemServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: Address, registry: SessionRegistry, suite: KemSuite,
                 io_timeout: float = 10.0):
        self.registry = registry
        self.suite = suite
        self.io_timeout = io_timeout
        self._thread: Optional[threading.Thread] = None
        super().__init__(address, _Handler)

    @property
    def address(self) -> Address:
        host, port = self.server_address[:2]
        return host, port

    def start(self) -> "KemServer":
        self._thread = threading.Thread(target=self.serve_forever, name=f"kem-{self.address[1]}",
                                        daemon=True)
        self._thread.start()
        return self

    def close(self):
        self.shutdown()
        self.server_close()


def serve_kem(listen: Address, registry: SessionRegistry, params: str = DEFAULT_PARAMS,
              io_timeout: float = 10.0) -> KemServer:
    try:
        server = KemServer(listen, registry, get_suite(params), io_timeout)
    except OSError as exc:
        raise BindError(f"cannot listen on {listen[0]}:{listen[1]}: {exc}") from None
    return server.start()


# -- initiator ----------------------------------------------------------------

def initiate_kem(peer: Address, session_id: str, registry: Optional[SessionRegistry] = None,
                 params: str = DEFAULT_PARAMS, timeout: float = 10.0) -> bytes:
    """Run one exchange against ``peer`` and return the 32-byte shared secret."""
    suite = get_suite(params)
    try:
        sock = socket.create_connection(peer, timeout=timeout)
    except OSError as exc:
        raise ConnectError(f"cannot reach KEM peer {peer[0]}:{peer[1]}: {exc}") from None
    with sock:
        try:
            send_frame(sock, KemWireMessage(FrameKind.PUBLIC_KEY_REQUEST, session_id,
                                            REQUEST_PUBLIC_KEY))
            reply = _expect(read_frame(sock), FrameKind.PUBLIC_KEY_REPLY, session_id)
            secret, ciphertext = suite.encapsulate(reply.payload)
            send_frame(sock, KemWireMessage(FrameKind.CIPHERTEXT, session_id, ciphertext))
            _expect(read_frame(sock), FrameKind.CONFIRM, session_id)
        except OSError as exc:
            raise ConnectError(f"KEM exchange with {peer[0]}:{peer[1]} failed: {exc}") from None
    if registry is not None:
        registry.store(session_id, secret, Role.INITIATOR)
    return secret


def _expect(msg: KemWireMessage, kind: FrameKind, session_id: str) -> KemWireMessage:
    if msg.kind is FrameKind.ERROR:
        raise ProtocolError(msg.payload.decode("utf-8", "replace"))
    if msg.kind is not kind or msg.session_id != session_id:
        raise ProtocolError(f"expected {kind.name} for {session_id!r}, got {msg.kind.name}")
    return msg
