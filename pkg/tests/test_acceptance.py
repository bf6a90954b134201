"""Acceptance criteria AC1-AC10, each at its stated tolerance.

Every test carries a ``criterion`` marker; the session summary prints one
PASS/FAIL line per criterion.
"""
import base64
import dataclasses
import os
import random
import socket
import sqlite3
import struct
import threading
import time
from collections import Counter

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

import strategies as wire
from graphs import brute_force_min, random_connected
from kmstn import model
from kmstn.bench import stats
from kmstn.bench.harness import ExperimentSpec, Harness, record_from_trace
from kmstn.errors import MandatoryExtensionError, UnsealError
from kmstn.kem import FrameKind, KemWireMessage
from kmstn.keystore import KeyStore, init_device_seal
from kmstn.model import AckStatus, KeyBlock, KeyContainer
from kmstn.routing import route_fallback

QKD_PAIRS = [("kmstn1", "kmstn2"), ("kmstn3", "kmstn4"), ("kmstn5", "kmstn6"),
             ("kmstn7", "kmstn8")]


def wait_until(pred, timeout=30.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(0.02)
    return pred()


# -- AC1 ---------------------------------------------------------------------

@pytest.mark.criterion("AC1")
def test_ac1_end_to_end_relay_integrity(mesh_factory):
    t0 = time.monotonic()
    mesh = mesh_factory(n_islands=4)
    assert len(mesh.nodes) == 8
    kinds = {(e.a, e.b): e.qkd_link for e in mesh.graph.edges.values()}
    assert sum(kinds.values()) == 4 and len(kinds) == 7
    c1, c8 = mesh.client("sae1"), mesh.client("sae8")
    sent = []
    for _ in range(100):
        sent.extend(c1.get_key("qkdsae2", 1, additional_slave_saes=["sae8"]).keys)
    n1 = mesh.node("kmstn1")
    statuses = [n1.wait_for_ack([k.key_id], "sae8", timeout=30) for k in sent]
    got = [c8.get_key_with_ids("sae1", [k.key_id]).keys[0] for k in sent]
    elapsed = time.monotonic() - t0
    matches = sum(a.key_id == b.key_id and a.key_material == b.key_material
                  for a, b in zip(sent, got))
    print(f"\nAC1: {matches}/100 bit-identical, {statuses.count(AckStatus.RELAYED)} relayed ACKs, "
          f"{elapsed:.1f} s")
    assert len({k.key_id for k in sent}) == 100
    assert matches == 100
    assert statuses == [AckStatus.RELAYED] * 100
    assert elapsed < 60


# -- AC2 ---------------------------------------------------------------------

class CiphertextTamperProxy:
    """TCP proxy in front of a KEM responder that flips one bit of every CIPHERTEXT frame."""

    def __init__(self, upstream):
        self.upstream = upstream
        self.sock = socket.create_server(("127.0.0.1", 0))
        self.address = self.sock.getsockname()
        self.tampered = 0
        self._stop = False
        threading.Thread(target=self._accept, daemon=True).start()

    def _accept(self):
        while not self._stop:
            try:
                client, _ = self.sock.accept()
            except OSError:
                return
            server = socket.create_connection(self.upstream)
            threading.Thread(target=self._client_to_server, args=(client, server),
                             daemon=True).start()
            threading.Thread(target=self._pipe, args=(server, client), daemon=True).start()

    @staticmethod
    def _recv(sock, n):
        buf = b""
        while len(buf) < n:
            chunk = sock.recv(n - len(buf))
            if not chunk:
                raise OSError("closed")
            buf += chunk
        return buf

    def _client_to_server(self, src, dst):
        try:
            while True:
                (length,) = struct.unpack(">I", self._recv(src, 4))
                body = bytearray(self._recv(src, length))
                if body[0] == FrameKind.CIPHERTEXT:
                    body[-1] ^= 0x01
                    self.tampered += 1
                dst.sendall(struct.pack(">I", length) + bytes(body))
        except OSError:
            pass
        finally:
            for s in (src, dst):
                try:
                    s.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass

    @staticmethod
    def _pipe(src, dst):
        try:
            while True:
                data = src.recv(65536)
                if not data:
                    break
                dst.sendall(data)
        except OSError:
            pass
        finally:
            for s in (src, dst):
                try:
                    s.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass

    def close(self):
        self._stop = True
        self.sock.close()


def _hybrid_trials(mesh, n):
    """Send ``n`` single-key relays kmstn1 -> kmstn3; the first hop is a QKD edge."""
    n1 = mesh.node("kmstn1")
    c1 = mesh.client("sae1")
    before = len(n1.failed_jobs) + len(n1.forwarded)
    keys = [c1.get_key("qkdsae2", 1, additional_slave_saes=["sae3"]).keys[0] for _ in range(n)]
    assert wait_until(lambda: len(n1.failed_jobs) + len(n1.forwarded) - before >= n)
    return keys


def _delivered(mesh, keys):
    store = mesh.node("kmstn3").keystore
    count = 0
    for k in keys:
        try:
            count += store.get_key(k.key_id, "sae3") == k
        except Exception:
            pass
    return count


@pytest.mark.criterion("AC2")
def test_ac2_control_uncorrupted_hop_delivers(mesh_factory):
    mesh = mesh_factory(n_islands=2)
    assert mesh.node("kmstn1").hop_mode("kmstn2").value == "qkd_hybrid"
    keys = _hybrid_trials(mesh, 5)
    assert wait_until(lambda: _delivered(mesh, keys) == 5)


@pytest.mark.criterion("AC2")
def test_ac2_corrupted_transport_key_at_receiver(mesh_factory, monkeypatch):
    mesh = mesh_factory(n_islands=2)
    n1, n2 = mesh.node("kmstn1"), mesh.node("kmstn2")
    kme_id = mesh.graph.nodes["kmstn2"].attached_kmes[0].kme_id
    southbound = n2.southbound[kme_id]
    real = southbound.dec_keys
    flipped = []

    def corrupt(master_sae, key_ids):
        kc = real(master_sae, key_ids)
        k = kc.keys[0]
        bad = bytes([k.key_material[0] ^ 0x01]) + k.key_material[1:]
        flipped.append(k.key_id)
        return KeyContainer((KeyBlock(k.key_id, bad),) + kc.keys[1:])
    monkeypatch.setattr(southbound, "dec_keys", corrupt)
    keys = _hybrid_trials(mesh, 50)
    auth = [j for j in n1.failed_jobs if j.error.startswith("auth_failure")]
    delivered = _delivered(mesh, keys)
    print(f"\nAC2 transport-key corruption: {len(flipped)} corrupted, {len(auth)} auth failures, "
          f"{delivered}/50 delivered")
    assert len(flipped) == 50 and len(auth) == 50
    assert delivered == 0 and n2.forwarded == [] and mesh.node("kmstn3").keystore.count() == 0


@pytest.mark.criterion("AC2")
def test_ac2_corrupted_kem_ciphertext_in_flight(mesh_factory, monkeypatch):
    mesh = mesh_factory(n_islands=2)
    n1, n2 = mesh.node("kmstn1"), mesh.node("kmstn2")
    proxy = CiphertextTamperProxy(mesh.graph.nodes["kmstn2"].pqc_endpoint.address)
    real = n1._pqc_address
    monkeypatch.setattr(n1, "_pqc_address",
                        lambda peer: proxy.address if peer == "kmstn2" else real(peer))
    try:
        keys = _hybrid_trials(mesh, 50)
    finally:
        proxy.close()
    auth = [j for j in n1.failed_jobs if j.error.startswith("auth_failure")]
    delivered = _delivered(mesh, keys)
    print(f"\nAC2 KEM-ciphertext corruption: {proxy.tampered} tampered, {len(auth)} auth failures, "
          f"{delivered}/50 delivered")
    assert proxy.tampered == 50 and len(auth) == 50
    assert delivered == 0 and n2.forwarded == [] and mesh.node("kmstn3").keystore.count() == 0


# -- AC3 ---------------------------------------------------------------------

@pytest.mark.criterion("AC3")
def test_ac3_routing_oracle_equivalence():
    rng = random.Random(20240603)
    checked = mismatches = 0
    for _ in range(200):
        g = random_connected(rng, max_nodes=8)
        assert len(g.nodes) <= 8
        for s in g.nodes:
            for d in g.nodes:
                if s == d:
                    continue
                oracle = brute_force_min(g, s, d)
                dijkstra = g.path_cost(g.path(s, d))
                astar = g.path_cost(route_fallback(g, s, d))
                checked += 1
                mismatches += dijkstra != oracle or astar != dijkstra
    print(f"\nAC3: {checked} (src, dst) pairs over 200 graphs, {mismatches} mismatches")
    assert mismatches == 0


# -- AC4 ---------------------------------------------------------------------

@pytest.mark.criterion("AC4")
def test_ac4_keyrate_calibration(mesh_factory):
    mesh = mesh_factory(n_islands=4, seed=7, prefill=False,
                        profiles={2: {"mean_skr_bps": 500.0}})
    h = Harness.for_mesh(mesh)
    targets = {p: 500.0 if p == ("kmstn5", "kmstn6") else 2500.0 for p in QKD_PAIRS}
    measured = {}
    for a, b in QKD_PAIRS:
        for src, dst in ((a, b), (b, a)):
            spec = ExperimentSpec("keyrate", src, dst, n_requests=500, keys_per_request=8,
                                  drain=True)
            measured[(src, dst)] = h.run(spec).aggregates["keyrate_bps"]
    lines = []
    for (src, dst), rate in measured.items():
        target = targets.get((src, dst)) or targets[(dst, src)]
        lines.append(f"  {src}->{dst}: {rate:8.1f} bps (target {target:.0f}, "
                     f"{100 * (rate / target - 1):+.1f}%)")
    print("\nAC4 keyrates:\n" + "\n".join(lines))
    for (src, dst), rate in measured.items():
        target = targets.get((src, dst)) or targets[(dst, src)]
        assert 0.8 * target <= rate <= 1.2 * target, (src, dst, rate)
    slow = {measured[("kmstn5", "kmstn6")], measured[("kmstn6", "kmstn5")]}
    assert max(slow) < min(r for k, r in measured.items() if r not in slow)


# -- AC5 ---------------------------------------------------------------------

@pytest.mark.criterion("AC5")
def test_ac5_statistics_match_hand_computed_trace():
    rec = record_from_trace(ExperimentSpec("delay", "kmstn1", "kmstn2"), [100, 110, 90, 105, 100])
    assert rec.aggregates["latency_median_ms"] == 100
    assert stats.jitter([100, 110, 90, 105, 100]) == [10, 20, 15, 5]
    assert rec.aggregates["jitter_median_ms"] == 12.5


@pytest.mark.criterion("AC5")
def test_ac5_delay_ordering(mesh_factory):
    short = {"service_latency_ms": {"dist": "lognormal", "median": 120.0, "sigma": 0.25}}
    long_ = {"service_latency_ms": {"dist": "lognormal", "median": 600.0, "sigma": 0.25}}
    mesh = mesh_factory(n_islands=4, seed=11, profiles={0: short, 1: short, 2: long_, 3: short})
    h = Harness.for_mesh(mesh)
    medians = {}
    for src, dst in QKD_PAIRS:
        rec = h.run(ExperimentSpec("delay", src, dst, n_requests=100))
        medians[(src, dst)] = rec.aggregates["latency_median_ms"]
    print("\nAC5 latency medians: " + ", ".join(f"{a}->{b} {m:.1f} ms"
                                                for (a, b), m in medians.items()))
    long_median = medians.pop(("kmstn5", "kmstn6"))
    assert long_median > 2 * max(medians.values())


# -- AC6 ---------------------------------------------------------------------

@pytest.mark.criterion("AC6")
def test_ac6_paused_depletion_exactly_half(mesh_factory):
    mesh = mesh_factory(n_islands=1, profiles={0: {"buffer_capacity_keys": 50}}, prefill=False)
    pair = mesh.pair_of("kmstn1")
    pair.pause()
    assert pair.fill() == 50
    rec = Harness.for_mesh(mesh).run(ExperimentSpec("concurrency", "kmstn1", "kmstn2",
                                                    concurrency=100))
    errors = Counter(r.error for r in rec.requests if not r.success)
    print(f"\nAC6 paused epoch: {rec.aggregates['n_success']} successes, {dict(errors)}")
    assert len(rec.requests) == 100
    assert rec.aggregates["n_success"] == 50 and errors == {"depleted": 50}
    assert pair.status("qkdsae2")["stored_key_count"] == 0 and pair.mirror_consistent()


@pytest.mark.criterion("AC6")
def test_ac6_error_rate_non_decreasing_in_concurrency(mesh_factory):
    mesh = mesh_factory(n_islands=1, profiles={0: {"buffer_capacity_keys": 50}}, prefill=False)
    pair = mesh.pair_of("kmstn1")
    h = Harness.for_mesh(mesh)
    rates = {}
    for c in (1, 10, 50, 100):
        pair.pause()
        h.drain(ExperimentSpec("delay", "kmstn1", "kmstn2"))
        pair.fill()
        pair.resume()
        rec = h.run(ExperimentSpec("concurrency", "kmstn1", "kmstn2", concurrency=c, epochs=5,
                                   epoch_gap_s=0.5))
        rates[c] = rec.aggregates["error_rate"]
    print(f"\nAC6 sweep error rates: {rates}")
    seq = [rates[c] for c in (1, 10, 50, 100)]
    assert all(a <= b for a, b in zip(seq, seq[1:]))


# -- AC7 ---------------------------------------------------------------------

@pytest.mark.criterion("AC7")
def test_ac7_ack_after_commit(mesh_factory, monkeypatch):
    mesh = mesh_factory(n_islands=4)
    n8 = mesh.node("kmstn8")
    db_path = n8.keystore.path
    committed, violations, checked = set(), [], []
    lock = threading.Lock()
    real_put, real_ack = n8.keystore.put_key, n8.send_ack

    def put_key(key, owner, targets, namespace="relay"):
        out = real_put(key, owner, targets, namespace=namespace)
        with lock:
            committed.add(key.key_id)
        return out

    def visible(key_id):
        # a second connection only sees committed rows
        with sqlite3.connect(db_path, timeout=10) as con:
            return con.execute("SELECT 1 FROM keys WHERE key_id=?", (key_id,)).fetchone()

    def send_ack(url, acks):
        for ack in acks:
            if ack.ack_status is AckStatus.RELAYED:
                for kid in ack.key_ids:
                    checked.append(kid)
                    with lock:
                        ok = kid in committed
                    if not ok or not visible(kid):
                        violations.append(kid)
        return real_ack(url, acks)

    monkeypatch.setattr(n8.keystore, "put_key", put_key)
    monkeypatch.setattr(n8, "send_ack", send_ack)
    c1 = mesh.client("sae1")
    keys = [c1.get_key("qkdsae2", 1, additional_slave_saes=["sae8"]).keys[0] for _ in range(100)]
    n1 = mesh.node("kmstn1")
    statuses = [n1.wait_for_ack([k.key_id], "sae8", timeout=30) for k in keys]
    print(f"\nAC7: {len(checked)} ACKed keys checked, {len(violations)} violations")
    assert statuses == [AckStatus.RELAYED] * 100
    assert len(checked) == 100 and violations == []


# -- AC8 ---------------------------------------------------------------------

@pytest.mark.criterion("AC8")
def test_ac8_keystore_at_rest(tmp_path):
    state = tmp_path / "state"
    secret = tmp_path / "device.secret"
    seal = init_device_seal(state, device_secret_path=secret, hardware_paths=())
    store = KeyStore(seal)
    keys = [KeyBlock(model.new_key_id(), os.urandom(32)) for _ in range(100)]
    for k in keys:
        store.put_key(k, "qkdsae1", ["sae8"])
    store.close()

    needles = []
    for k in keys:
        m = k.key_material
        needles += [m, base64.b64encode(m), m.hex().encode(), base64.urlsafe_b64encode(m)]
    hits, scanned = 0, 0
    for p in tmp_path.rglob("*"):
        if p.is_file():
            data = p.read_bytes()
            scanned += 1
            hits += sum(n in data for n in needles)
    print(f"\nAC8: scanned {scanned} files, {hits} plaintext occurrences")
    assert scanned >= 3 and hits == 0

    with pytest.raises(UnsealError):
        init_device_seal(state, device_secret_path=tmp_path / "other.secret", hardware_paths=())

    store = KeyStore(init_device_seal(state, device_secret_path=secret, hardware_paths=()))
    recovered = [store.get_key(k.key_id, "sae8") for k in keys]
    store.close()
    assert recovered == keys


# -- AC9 ---------------------------------------------------------------------

@pytest.mark.criterion("AC9")
def test_ac9_session_freshness(mesh_factory, monkeypatch):
    mesh = mesh_factory(n_islands=4)
    sealed, consumed = [], Counter()
    lock = threading.Lock()
    for node in mesh.nodes.values():
        real_seal = node.seal_for_peer
        real_lookup = node.registry.lookup_secret

        def seal_for_peer(peer, plaintext, real_seal=real_seal):
            env = real_seal(peer, plaintext)
            with lock:
                sealed.append((env.session, env.iv))
            return env

        def lookup_secret(sid, real_lookup=real_lookup):
            secret = real_lookup(sid)
            with lock:
                consumed[sid] += 1
            return secret
        monkeypatch.setattr(node, "seal_for_peer", seal_for_peer)
        monkeypatch.setattr(node.registry, "lookup_secret", lookup_secret)

    c1, n1 = mesh.client("sae1"), mesh.node("kmstn1")
    # each relay to sae8 seals 7 hop envelopes plus one ACK envelope
    while len(sealed) < 500:
        kc = c1.get_key("qkdsae2", 1, additional_slave_saes=["sae8"])
        assert n1.wait_for_ack(kc.key_ids, "sae8", timeout=30) is AckStatus.RELAYED
        assert wait_until(lambda: len(n1.acks_received) * 8 <= len(sealed), 10)
    with lock:
        pairs = list(sealed)
        uses = dict(consumed)
    sessions = [s for s, _ in pairs]
    print(f"\nAC9: {len(pairs)} messages, {len(set(pairs))} unique (session, IV), "
          f"{len(set(sessions))} unique sessions, max consumption {max(uses.values())}")
    assert len(pairs) >= 500
    assert len(set(pairs)) == len(pairs)
    assert len(set(sessions)) == len(sessions)
    assert max(uses.values()) == 1


# -- AC10 --------------------------------------------------------------------

def _kem_frames():
    return st.builds(KemWireMessage, st.sampled_from(list(FrameKind)),
                     st.text(max_size=40), st.binary(max_size=200))


def _wire_round_trips():
    return [
        ("KeyContainer", wire.key_containers, model.encode_key_container,
         model.decode_key_container),
        ("ExtKeyContainer", wire.ext_containers, model.encode_ext_keys, model.decode_ext_keys),
        ("AckContainer", wire.ack_containers, model.encode_ack, model.decode_ack),
        ("AckContainers", st.lists(wire.ack_containers, min_size=1, max_size=3).map(tuple),
         model.encode_ack_containers, model.decode_ack_containers),
        ("VoidRequest", wire.void_requests, model.encode_void_request,
         model.decode_void_request),
        ("EncryptedEnvelope", wire.envelopes(), model.encode_envelope, model.decode_envelope),
        ("KemWireMessage", _kem_frames(), lambda m: m.encode(),
         lambda b: KemWireMessage.decode_body(b[4:])),
    ]


AC10_SETTINGS = settings(max_examples=1000, deadline=None, database=None, derandomize=True,
                         suppress_health_check=list(HealthCheck))


@pytest.mark.criterion("AC10")
@pytest.mark.parametrize("name,strategy,encode,decode", _wire_round_trips(),
                         ids=[w[0] for w in _wire_round_trips()])
def test_ac10_round_trip_bijection(name, strategy, encode, decode):
    seen = []

    @AC10_SETTINGS
    @given(strategy)
    def check(obj):
        data = encode(obj)
        back = decode(data)
        assert back == obj
        assert encode(back) == data
        seen.append(1)

    check()
    print(f"\nAC10 {name}: {len(seen)} instances round-tripped")
    assert len(seen) >= 1000


@pytest.mark.criterion("AC10")
def test_ac10_mandatory_extension_rejection():
    supported = frozenset({"route_type", "priority"})
    fired = []
    names = st.text(min_size=1, max_size=12)

    @AC10_SETTINGS
    @given(wire.ext_containers, st.lists(names, min_size=1, max_size=3))
    def check(container, extra):
        unsupported = {n for n in extra if n not in supported}
        mandatory = tuple({n: True} for n in extra)
        c = dataclasses.replace(container, extension_mandatory=mandatory)
        wire_c = model.decode_ext_keys(model.encode_ext_keys(c))
        if unsupported:
            with pytest.raises(MandatoryExtensionError) as ei:
                model.validate_extensions(wire_c, supported)
            assert set(ei.value.names) == unsupported
            fired.append(1)
        else:
            model.validate_extensions(wire_c, supported)
        # optional extensions never cause rejection
        model.validate_extensions(dataclasses.replace(
            wire_c, extension_mandatory=(), extension_optional=mandatory), supported)

    check()
    assert len(fired) >= 900
