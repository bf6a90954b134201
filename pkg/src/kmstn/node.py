"""The trusted-node core: SAE proxy, hop-by-hop key relay, ACKs and voids.

A KMSTN answers its SAEs with keys taken from an attached QKD node and, for
every additional slave SAE that lives elsewhere in the overlay, forwards the
same keys hop by hop.  Each hop is a fresh encrypted envelope:

* over a QKD edge the message key mixes a fresh 256-bit transport key from
  the shared QKD pair with an ML-KEM secret whose session id is that key's id;
* over any other edge the message key comes from the ML-KEM secret alone.

The destination persists keys in its sealed keystore and only then reports
``relayed`` back to the origin.  Keys are never retransmitted.
"""
from __future__ import annotations

import enum
import logging
import queue
import threading
import time
import uuid
from collections import OrderedDict, deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import httpx

from . import model
from .envelope import KeyMode, MessageKeyMode, derive_message_key, open_envelope, seal
from .errors import (AlreadyConsumed, AuthFailure, ConnectError, Depleted, HopDepleted,
                     InvariantError, KeyNotPresent, KmstnError, MandatoryExtensionError, NotFound,
                     PeerUnreachable, Unauthorized, UnknownSae, Unreachable)
from .http import Etsi014Client, request
from .kem import DEFAULT_PARAMS, SessionRegistry, initiate_kem, serve_kem
from .keystore import KeyStore
from .model import (AckContainer, AckStatus, EncryptedEnvelope, ExtKeyContainer, KeyBlock,
                    KeyContainer, VoidRequest)
from .routing import AttachedKme, KmsGraph, resolve_destination

log = logging.getLogger(__name__)

TRANSPORT_KEY_BITS = 256
ACK_ATTEMPTS = 3
ACK_BACKOFF_S = 0.2
SETTLED_MEMORY = 10_000
EXT_KEYS_PATH = "/api/v1/ext_keys"
ACK_PATH = "/api/v1/ack_containers"
VOID_PATH = "/api/v1/void_keys"


class HopMode(str, enum.Enum):
    QKD_HYBRID = "qkd_hybrid"
    PQC_ONLY = "pqc_only"


@dataclass
class RelayJob:
    keys: Tuple[KeyBlock, ...]
    origin_master_sae: str
    remaining_targets: Tuple[str, ...]
    next_hop: str
    hop_mode: HopMode
    ack_callback_url: str
    extension_mandatory: Tuple[dict, ...] = ()
    extension_optional: Tuple[dict, ...] = ()
    attempts: int = 0
    error: Optional[str] = None

    @property
    def key_ids(self) -> List[str]:
        return [k.key_id for k in self.keys]


@dataclass
class PendingAck:
    key_ids: Tuple[str, ...]
    target: str
    callback_url: str
    deadline: float
    status: Optional[AckStatus] = None
    done: threading.Event = field(default_factory=threading.Event, repr=False)

    def resolve(self, status: AckStatus) -> bool:
        """Settle this ACK; later calls are ignored."""
        if self.done.is_set():
            return False
        self.status = status
        self.done.set()
        return True


class KmstnNode:
    def __init__(self, kmstn_id: str, graph: KmsGraph, keystore: KeyStore, http: httpx.Client,
                 tls: bool = False, kem_params: str = DEFAULT_PARAMS, ack_timeout_s: float = 30.0,
                 supported_extensions: Iterable[str] = (), registry: Optional[SessionRegistry] = None,
                 kem_timeout_s: float = 10.0):
        if kmstn_id not in graph.nodes:
            raise UnknownSae(f"no KMSTN {kmstn_id!r} in the topology")
        self.kmstn_id = kmstn_id
        self.graph = graph
        self.node = graph.nodes[kmstn_id]
        self.keystore = keystore
        self.http = http
        self.tls = tls
        self.kem_params = kem_params
        self.kem_timeout_s = kem_timeout_s
        self.ack_timeout_s = ack_timeout_s
        self.supported_extensions = frozenset(supported_extensions)
        self.registry = registry or SessionRegistry()
        self.southbound: Dict[str, Etsi014Client] = {
            k.kme_id: Etsi014Client(k.endpoint.url(tls), http) for k in self.node.attached_kmes}
        self.callback_url = self.node.service_endpoint.url(tls) + ACK_PATH

        self._lock = threading.Lock()
        self._queues: Dict[str, "queue.Queue[Optional[RelayJob]]"] = {}
        self._workers: List[threading.Thread] = []
        self._acks = ThreadPoolExecutor(max_workers=4, thread_name_prefix=f"{kmstn_id}-ack")
        self._pending: Dict[Tuple[frozenset, str], PendingAck] = {}
        # outcomes of settled ACKs, oldest first, so late waiters still see them
        self._settled: "OrderedDict[Tuple[frozenset, str], AckStatus]" = OrderedDict()
        self._transport_ids: deque = deque(maxlen=100_000)
        self._transport_set: set = set()
        self._stop = threading.Event()
        self._kem_server = None
        self._reaper: Optional[threading.Thread] = None

        self.forwarded: List[RelayJob] = []
        self.failed_jobs: List[RelayJob] = []
        self.acks_received: List[AckContainer] = []
        self.acks_sent: List[Tuple[str, Tuple[AckContainer, ...]]] = []
        self.ack_failures: List[Tuple[str, str]] = []

    # -- lifecycle
    def start(self) -> "KmstnNode":
        self._kem_server = serve_kem(self.node.pqc_endpoint.address, self.registry, self.kem_params)
        self._reaper = threading.Thread(target=self._reap_loop, name=f"{self.kmstn_id}-reaper",
                                        daemon=True)
        self._reaper.start()
        return self

    def close(self):
        self._stop.set()
        with self._lock:
            queues = list(self._queues.values())
        for q in queues:
            q.put(None)
        for t in self._workers:
            t.join(timeout=5)
        self._acks.shutdown(wait=True)
        if self._kem_server is not None:
            self._kem_server.close()
            self._kem_server = None

    def _reap_loop(self):
        while not self._stop.wait(0.25):
            self.expire_pending_acks()
            self.registry.purge_expired()

    # -- helpers
    def _kme_for_slave(self, slave_sae: str) -> Optional[AttachedKme]:
        for kme in self.node.attached_kmes:
            if kme.slave_sae_id == slave_sae:
                return kme
        return None

    def _remember_transport(self, key_id: str):
        with self._lock:
            if len(self._transport_ids) == self._transport_ids.maxlen:
                self._transport_set.discard(self._transport_ids[0])
            self._transport_ids.append(key_id)
            self._transport_set.add(key_id)

    def is_transport_key(self, key_id: str) -> bool:
        with self._lock:
            return key_id in self._transport_set

    def _pqc_address(self, peer_id: str) -> Tuple[str, int]:
        return self.graph.nodes[peer_id].pqc_endpoint.address

    def _peer_url(self, peer_id: str, path: str) -> str:
        return self.graph.nodes[peer_id].service_endpoint.url(self.tls) + path

    def hop_mode(self, peer_id: str) -> HopMode:
        return HopMode.QKD_HYBRID if self.graph.qkd_kme(self.kmstn_id, peer_id) else HopMode.PQC_ONLY

    def _kem(self, peer_id: str, session: str) -> bytes:
        try:
            return initiate_kem(self._pqc_address(peer_id), session, params=self.kem_params,
                                timeout=self.kem_timeout_s)
        except ConnectError as exc:
            raise PeerUnreachable(f"{peer_id}: {exc.message}") from None

    # -- hop encryption
    def seal_for_peer(self, peer_id: str, plaintext: bytes) -> EncryptedEnvelope:
        """Encrypt one message for the neighbour ``peer_id`` under a fresh per-hop key."""
        kme = self.graph.qkd_kme(self.kmstn_id, peer_id)
        if kme is None:
            session = str(uuid.uuid4())
            kem = self._kem(peer_id, session)
            return seal(plaintext, derive_message_key(MessageKeyMode(KeyMode.PQC_ONLY, kem)),
                        session)
        try:
            transport = self.southbound[kme.kme_id].enc_keys(kme.slave_sae_id, 1,
                                                             TRANSPORT_KEY_BITS).keys[0]
        except Depleted as exc:
            raise HopDepleted(f"QKD edge {self.kmstn_id}-{peer_id}: {exc.message}") from None
        except Unreachable as exc:
            raise HopDepleted(f"QKD node {kme.kme_id} unavailable: {exc.message}") from None
        self._remember_transport(transport.key_id)
        # the KEM session is named after the transport key
        kem = self._kem(peer_id, transport.key_id)
        key = derive_message_key(MessageKeyMode(KeyMode.HYBRID, kem, transport))
        return seal(plaintext, key, transport.key_id, kme.master_sae_id)

    def open_from_peer(self, envelope: EncryptedEnvelope) -> bytes:
        try:
            kem = self.registry.lookup_secret(envelope.session)
        except (NotFound, AlreadyConsumed) as exc:
            raise AuthFailure(f"no usable KEM secret for session {envelope.session}: "
                              f"{exc.message}") from None
        if envelope.sae is None:
            key = derive_message_key(MessageKeyMode(KeyMode.PQC_ONLY, kem))
        else:
            kme = self._kme_for_slave(envelope.sae)
            if kme is None:
                raise KeyNotPresent(f"no QKD link to {envelope.sae} at {self.kmstn_id}")
            transport = self.southbound[kme.kme_id].dec_keys(envelope.sae, [envelope.session]).keys[0]
            self._remember_transport(transport.key_id)
            key = derive_message_key(MessageKeyMode(KeyMode.HYBRID, kem, transport))
        return open_envelope(envelope, key)

    def secure_post(self, peer_id: str, url: str, plaintext: bytes) -> dict:
        envelope = self.seal_for_peer(peer_id, plaintext)
        try:
            resp = request(self.http, "POST", url, json=envelope.to_wire())
        except Unreachable as exc:
            raise PeerUnreachable(f"{peer_id}: {exc.message}") from None
        return resp.json() if resp.content else {}

    # -- northbound
    def _check_caller(self, sae_id: Optional[str]):
        if not sae_id or sae_id not in self.node.bound_master_saes:
            raise Unauthorized(f"SAE {sae_id!r} is not bound at {self.kmstn_id}")

    def handle_get_key(self, master_sae: str, slave_sae: str, number: int = 1,
                       size: Optional[int] = None, additional: Sequence[str] = (),
                       extension_mandatory: Sequence[dict] = (),
                       extension_optional: Sequence[dict] = ()) -> KeyContainer:
        self._check_caller(master_sae)
        kme = self._kme_for_slave(slave_sae)
        if kme is None:
            raise UnknownSae(f"{slave_sae!r} is not the far end of a QKD link at {self.kmstn_id}")
        unsupported = model.extension_names(extension_mandatory) - self.supported_extensions
        if unsupported:
            raise MandatoryExtensionError(unsupported)
        partner = self.graph.qkd_partner(self.kmstn_id, kme)
        local, relays = [], []
        for sae in dict.fromkeys(additional):
            dst = resolve_destination(self.graph, sae)
            if dst == self.kmstn_id:
                local.append(sae)
            elif dst == partner:
                continue  # the partner reads the same keys from its own QKD node
            elif not self.graph.reachable(self.kmstn_id, dst):
                raise Unreachable(f"no route from {self.kmstn_id} to {dst} for {sae}")
            else:
                relays.append((sae, dst))

        # only the QKD-facing part of the request goes southbound
        container = self.southbound[kme.kme_id].enc_keys(slave_sae, number, size)
        if local:
            for key in container.keys:
                self.keystore.put_key(key, kme.master_sae_id, local, namespace="southbound")
        for sae, dst in relays:
            nxt = self.graph.next_hop[(self.kmstn_id, dst)]
            job = RelayJob(container.keys, kme.master_sae_id, (sae,), nxt, self.hop_mode(nxt),
                           self.callback_url, tuple(extension_mandatory), tuple(extension_optional))
            self._track(job, sae)
            self._enqueue(job)
        return container

    def handle_get_key_with_ids(self, caller_sae: str, origin_slave_sae: str,
                                key_ids: Sequence[str]) -> KeyContainer:
        self._check_caller(caller_sae)
        if not key_ids:
            raise InvariantError("key_IDs must not be empty")
        for kid in key_ids:
            if self.is_transport_key(kid):
                raise KeyNotPresent(f"key {kid} not present")
        kme = self._kme_for_slave(origin_slave_sae)
        if kme is not None:
            try:
                return self.southbound[kme.kme_id].dec_keys(origin_slave_sae, key_ids)
            except KeyNotPresent:
                pass  # may still have been relayed here
        return KeyContainer(tuple(self.keystore.get_key(k, caller_sae) for k in key_ids))

    def status(self, caller_sae: Optional[str], slave_sae: str) -> dict:
        kme = self._kme_for_slave(slave_sae)
        if kme is not None:
            out = dict(self.southbound[kme.kme_id].status(slave_sae))
            out.update(kmstn_id=self.kmstn_id, reachable=True,
                       route=[self.kmstn_id, self.graph.qkd_partner(self.kmstn_id, kme)])
            return out
        dst = resolve_destination(self.graph, slave_sae)
        reachable = self.graph.reachable(self.kmstn_id, dst)
        return {
            "master_SAE_ID": caller_sae,
            "slave_SAE_ID": slave_sae,
            "kmstn_id": dst,
            "reachable": reachable,
            "route": self.graph.path(self.kmstn_id, dst) if reachable else [],
        }

    # -- relay
    def _track(self, job: RelayJob, target: str):
        pending = PendingAck(tuple(job.key_ids), target, job.ack_callback_url,
                             time.monotonic() + self.ack_timeout_s)
        with self._lock:
            self._pending[(frozenset(job.key_ids), target)] = pending

    def _enqueue(self, job: RelayJob):
        with self._lock:
            q = self._queues.get(job.next_hop)
            if q is None:
                q = self._queues[job.next_hop] = queue.Queue()
                t = threading.Thread(target=self._relay_worker, args=(q,), daemon=True,
                                     name=f"{self.kmstn_id}->{job.next_hop}")
                self._workers.append(t)
                t.start()
        q.put(job)

    def _relay_worker(self, q: "queue.Queue[Optional[RelayJob]]"):
        while True:
            job = q.get()
            if job is None:
                return
            try:
                self.forward_key(job)
            except KmstnError as exc:
                job.error = f"{exc.code}: {exc.message}"
                self.failed_jobs.append(job)
                log.error("%s: relay of %d key(s) to %s via %s failed, not retransmitted: %s",
                          self.kmstn_id, len(job.keys), ",".join(job.remaining_targets),
                          job.next_hop, job.error)
            except Exception as exc:  # keep the worker alive
                job.error = repr(exc)
                self.failed_jobs.append(job)
                log.exception("%s: relay worker error", self.kmstn_id)

    def forward_key(self, job: RelayJob) -> dict:
        job.attempts += 1
        container = ExtKeyContainer(job.keys, job.origin_master_sae, job.remaining_targets,
                                    job.ack_callback_url, job.extension_mandatory,
                                    job.extension_optional)
        result = self.secure_post(job.next_hop, self._peer_url(job.next_hop, EXT_KEYS_PATH),
                                  model.encode_ext_keys(container))
        self.forwarded.append(job)
        return result

    def handle_ext_keys(self, envelope: EncryptedEnvelope) -> dict:
        container = model.decode_ext_keys(self.open_from_peer(envelope))
        model.validate_extensions(container, self.supported_extensions)
        callback_peer = self.graph.kmstn_for_url(container.ack_callback_url)
        if callback_peer is None:
            raise InvariantError(f"ack callback {container.ack_callback_url} is not a known KMSTN")
        local, remote = [], {}
        for sae in container.target_sae_ids:
            dst = resolve_destination(self.graph, sae)
            if dst == self.kmstn_id:
                local.append(sae)
            else:
                if not self.graph.reachable(self.kmstn_id, dst):
                    raise Unreachable(f"no route from {self.kmstn_id} to {dst}")
                remote.setdefault(self.graph.next_hop[(self.kmstn_id, dst)], []).append(sae)
        for nxt, targets in remote.items():
            self._enqueue(RelayJob(container.keys, container.owner_master_sae_id, tuple(targets),
                                   nxt, self.hop_mode(nxt), container.ack_callback_url,
                                   container.extension_mandatory, container.extension_optional))
        if local:
            for key in container.keys:
                self.keystore.put_key(key, container.owner_master_sae_id, local)
            ack = AckContainer(tuple(k.key_id for k in container.keys), AckStatus.RELAYED,
                               container.owner_master_sae_id,
                               {"target_sae_ids": local, "kmstn_id": self.kmstn_id})
            self.send_ack(container.ack_callback_url, [ack])
        return {"accepted": True, "stored": len(container.keys) if local else 0,
                "forwarded": sum(len(t) for t in remote.values())}

    # -- acknowledgements
    def send_ack(self, callback_url: str, acks: Sequence[AckContainer]) -> Future:
        """Post ACKs in the background with bounded retries; failures are only logged."""
        peer = self.graph.kmstn_for_url(model.check_url(callback_url, "ack_callback_url"))
        if peer is None:
            raise InvariantError(f"ack callback {callback_url} is not a known KMSTN")
        acks = tuple(acks)
        return self._acks.submit(self._deliver_acks, peer, callback_url, acks)

    def _deliver_acks(self, peer: str, url: str, acks: Tuple[AckContainer, ...]):
        if peer == self.kmstn_id:
            self.receive_acks(acks)
            self.acks_sent.append((url, acks))
            return True
        body = model.encode_ack_containers(acks)
        for attempt in range(ACK_ATTEMPTS):
            try:
                self.secure_post(peer, url, body)
                self.acks_sent.append((url, acks))
                return True
            except KmstnError as exc:
                last = f"{exc.code}: {exc.message}"
                if attempt + 1 < ACK_ATTEMPTS and not self._stop.is_set():
                    time.sleep(ACK_BACKOFF_S * 2 ** attempt)
        self.ack_failures.append((url, last))
        log.warning("%s: ACK for %s to %s dropped after %d attempts: %s", self.kmstn_id,
                    [a.key_ids for a in acks], url, ACK_ATTEMPTS, last)
        return False

    def handle_ack_containers(self, envelope: EncryptedEnvelope) -> dict:
        acks = model.decode_ack_containers(self.open_from_peer(envelope))
        return {"accepted": True, "resolved": self.receive_acks(acks)}

    def receive_acks(self, acks: Iterable[AckContainer]) -> int:
        resolved = 0
        for ack in acks:
            self.acks_received.append(ack)
            ids = frozenset(ack.key_ids)
            targets = list((ack.message or {}).get("target_sae_ids") or [])
            with self._lock:
                if not targets:
                    targets = [t for (k, t) in self._pending if k == ids]
                matches = [self._pending.pop((ids, t), None) for t in targets]
            for p in matches:
                if p is not None and p.resolve(ack.ack_status):
                    self._settle(p)
                    resolved += 1
            if ack.ack_status is AckStatus.FAILED:
                log.error("%s: relay of %s reported failed", self.kmstn_id, list(ack.key_ids))
        return resolved

    def expire_pending_acks(self, now: Optional[float] = None) -> int:
        now = time.monotonic() if now is None else now
        with self._lock:
            expired = [k for k, p in self._pending.items() if p.deadline <= now]
            items = [self._pending.pop(k) for k in expired]
        for p in items:
            if p.resolve(AckStatus.FAILED):
                self._settle(p)
                log.error("%s: no ACK returned for keys %s to %s", self.kmstn_id,
                          list(p.key_ids), p.target)
        return len(items)

    def _settle(self, p: PendingAck):
        with self._lock:
            self._settled[(frozenset(p.key_ids), p.target)] = p.status
            while len(self._settled) > SETTLED_MEMORY:
                self._settled.popitem(last=False)

    def pending_acks(self) -> List[PendingAck]:
        with self._lock:
            return list(self._pending.values())

    def wait_for_ack(self, key_ids: Iterable[str], target: str,
                     timeout: float = 30.0) -> Optional[AckStatus]:
        """Block until the ACK for ``key_ids``/``target`` settles (test and harness helper)."""
        ids = frozenset(key_ids)
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                settled = self._settled.get((ids, target))
            if settled is not None:
                return settled
            for ack in list(self.acks_received):
                if frozenset(ack.key_ids) == ids and target in ((ack.message or {}).get(
                        "target_sae_ids") or [target]):
                    return ack.ack_status
            time.sleep(0.01)
        return None

    # -- voiding
    def void_remote(self, peer_kmstn: str, key_ids: Sequence[str], initiator_sae: str) -> dict:
        """Ask an adjacent KMSTN to void keys it holds; its ACKs come back to us."""
        req = VoidRequest(tuple(key_ids), initiator_sae, self.callback_url)
        return self.secure_post(peer_kmstn, self._peer_url(peer_kmstn, VOID_PATH),
                                model.encode_void_request(req))

    def handle_void_keys(self, envelope: EncryptedEnvelope) -> dict:
        req = model.decode_void_request(self.open_from_peer(envelope))
        voided, missing = [], []
        for kid in req.key_ids:
            try:
                self.keystore.void_key(kid)
                voided.append(kid)
            except KeyNotPresent:
                missing.append(kid)
        acks = []
        if voided:
            acks.append(AckContainer(tuple(voided), AckStatus.VOIDED, req.initiator_sae_id))
        if missing:
            acks.append(AckContainer(tuple(missing), AckStatus.KEY_NOT_PRESENT, req.initiator_sae_id))
        if req.ack_callback_url is not None:
            self.send_ack(req.ack_callback_url, acks)
        return {"accepted": True, "ack_containers": [a.to_wire() for a in acks]}
