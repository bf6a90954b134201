"""Load generator: keyrate, delay and concurrency experiments against a mesh.

The harness talks to KMSTNs only through SAE clients.  Requests go from the
SAE bound at ``src`` to its KMSTN, naming the far end of ``src``'s QKD link as
slave; when ``dst`` is neither ``src`` nor its QKD partner, the SAE bound at
``dst`` is added as an additional slave so the keys are relayed there.

Time is read from the mesh clock, so in simulation-time mode a run covering
minutes of key generation completes in seconds.
"""
from __future__ import annotations

import dataclasses
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

from ..errors import AbortedRun, Depleted, InvariantError, KmstnError
from ..routing import KmsGraph
from . import stats

log = logging.getLogger(__name__)

KINDS = ("keyrate", "delay", "concurrency")


@dataclass
class ExperimentSpec:
    kind: str
    src: str
    dst: str
    n_requests: int = 100
    concurrency: int = 1
    key_size_bits: Optional[int] = None
    keys_per_request: int = 1
    seed: int = 0
    epochs: int = 1
    epoch_gap_s: float = 0.0
    backoff_s: float = 0.25
    backoff_max_s: float = 2.0
    max_attempts: Optional[int] = None
    drain: bool = False
    window: int = stats.DEFAULT_WINDOW
    label: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvariantError(f"kind must be one of {KINDS}")
        if self.n_requests < 1 or self.concurrency < 1 or self.epochs < 1:
            raise InvariantError("n_requests, concurrency and epochs must be at least 1")
        if self.keys_per_request < 1:
            raise InvariantError("keys_per_request must be at least 1")
        if self.window < 2:
            raise InvariantError("window must be at least 2")

    @property
    def name(self) -> str:
        return self.label or f"{self.kind}-{self.src}-{self.dst}-c{self.concurrency}"

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(doc) - known
        if extra:
            raise InvariantError(f"unknown experiment fields {sorted(extra)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class RequestRecord:
    index: int
    epoch: int
    worker: int
    timestamp_s: float
    latency_ms: float
    success: bool
    bits: int = 0
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class MetricsRecord:
    spec: ExperimentSpec
    requests: List[RequestRecord]
    started_s: float
    finished_s: float
    aggregates: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = aggregate(self.spec, self.requests, self.started_s, self.finished_s)

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "started_s": self.started_s,
                "finished_s": self.finished_s, "aggregates": dict(self.aggregates),
                "requests": [r.to_dict() for r in self.requests]}

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsRecord":
        return cls(ExperimentSpec.from_dict(doc["spec"]),
                   [RequestRecord(**r) for r in doc["requests"]],
                   doc["started_s"], doc["finished_s"], dict(doc.get("aggregates") or {}))


def instantaneous_rates(requests: Sequence[RequestRecord], started_s: float) -> List[float]:
    """Bits of each successful request over the time since the previous success finished."""
    rates, last = [], started_s
    for r in sorted(requests, key=lambda r: r.timestamp_s + r.latency_ms / 1000.0):
        done = r.timestamp_s + r.latency_ms / 1000.0
        if r.success:
            dt = done - last
            if dt > 0:
                rates.append(r.bits / dt)
            last = done
    return rates


def aggregate(spec: ExperimentSpec, requests: Sequence[RequestRecord], started_s: float,
              finished_s: float) -> Dict[str, object]:
    ok = [r for r in requests if r.success]
    n = len(requests)
    delivered = sum(r.bits for r in ok)
    elapsed = finished_s - started_s
    rates = instantaneous_rates(requests, started_s)
    mean_rate, std_rate = stats.mean_std(rates)
    out = {
        "n_requests": n,
        "n_success": len(ok),
        "error_rate": (n - len(ok)) / n if n else None,
        "concurrency": spec.concurrency,
        "delivered_bits": delivered,
        "elapsed_s": elapsed,
        "keyrate_bps": delivered / elapsed if elapsed > 0 else None,
        "mean_keyrate_bps": mean_rate,
        "std_keyrate_bps": std_rate,
        "p95_keyrate_bps": stats.percentile(rates, 95),
        "window": spec.window,
    }
    out.update(stats.latency_summary([r.latency_ms for r in ok], spec.window))
    return out


class Harness:
    def __init__(self, graph: KmsGraph, client_factory: Callable[[str], object], clock):
        self.graph = graph
        self.client_factory = client_factory
        self.clock = clock
        self._clients: Dict[str, object] = {}

    @classmethod
    def for_mesh(cls, mesh) -> "Harness":
        return cls(mesh.graph, mesh.client, mesh.clock)

    def _client(self, sae_id: str):
        if sae_id not in self._clients:
            self._clients[sae_id] = self.client_factory(sae_id)
        return self._clients[sae_id]

    def plan(self, spec: ExperimentSpec):
        """(client, slave SAE, additional slave SAEs) for an experiment."""
        for nid in (spec.src, spec.dst):
            if nid not in self.graph.nodes:
                raise InvariantError(f"unknown KMSTN {nid!r}")
        src = self.graph.nodes[spec.src]
        if not src.attached_kmes or not src.bound_master_saes:
            raise InvariantError(f"{spec.src} has no QKD link or no bound SAE")
        kme = src.attached_kmes[0]
        additional = []
        if spec.dst not in (spec.src, self.graph.qkd_partner(spec.src, kme)):
            dst = self.graph.nodes[spec.dst]
            if not dst.bound_master_saes:
                raise InvariantError(f"{spec.dst} binds no SAE")
            additional = [dst.bound_master_saes[0]]
        return self._client(src.bound_master_saes[0]), kme.slave_sae_id, additional

    def _one(self, client, slave, additional, spec: ExperimentSpec, index: int, epoch: int,
             worker: int) -> RequestRecord:
        t0 = self.clock.now()
        try:
            kc = client.get_key(slave, spec.keys_per_request, spec.key_size_bits, additional)
        except KmstnError as exc:
            return RequestRecord(index, epoch, worker, t0, self._ms(t0), False, 0, exc.code)
        return RequestRecord(index, epoch, worker, t0, self._ms(t0), True,
                             sum(k.size_bits for k in kc.keys))

    def _ms(self, t0: float) -> float:
        return max(0.0, (self.clock.now() - t0) * 1000.0)

    def drain(self, spec: ExperimentSpec) -> int:
        """Empty the source link's buffer so timing starts from generation, not stock."""
        client, slave, _ = self.plan(spec)
        taken = 0
        for _ in range(100):
            count = int(client.status(slave).get("stored_key_count") or 0)
            if count == 0:
                break
            try:
                taken += len(client.get_key(slave, count).keys)
            except Depleted:
                break
        return taken

    def run_keyrate(self, spec: ExperimentSpec) -> MetricsRecord:
        """Back-to-back requests until ``n_requests`` succeed; Depleted answers back off."""
        client, slave, additional = self.plan(spec)
        if spec.drain:
            self.drain(spec)
        max_attempts = spec.max_attempts or 50 * spec.n_requests
        records, successes = [], 0
        backoff = spec.backoff_s
        started = self.clock.now()
        while successes < spec.n_requests and len(records) < max_attempts:
            rec = self._one(client, slave, additional, spec, len(records), 0, 0)
            records.append(rec)
            if rec.success:
                successes += 1
                backoff = spec.backoff_s
            else:
                # keys keep accumulating while we wait, so a long back-off loses nothing
                self.clock.sleep(backoff)
                backoff = min(2 * backoff, max(spec.backoff_max_s, spec.backoff_s))
        if successes == 0:
            raise AbortedRun(f"{spec.name}: all {len(records)} requests failed")
        # stop the clock at the last delivery so trailing back-off is not counted
        last = max(r.timestamp_s + r.latency_ms / 1000.0 for r in records if r.success)
        return MetricsRecord(spec, records, started, last)

    def run_delay(self, spec: ExperimentSpec) -> MetricsRecord:
        """``n_requests`` sequential requests; latency statistics over the successes."""
        client, slave, additional = self.plan(spec)
        started = self.clock.now()
        records = [self._one(client, slave, additional, spec, i, 0, 0)
                   for i in range(spec.n_requests)]
        if not any(r.success for r in records):
            raise AbortedRun(f"{spec.name}: all {len(records)} requests failed")
        return MetricsRecord(spec, records, started, self.clock.now())

    def run_concurrency(self, spec: ExperimentSpec) -> MetricsRecord:
        """``epochs`` rounds of ``concurrency`` simultaneous requests (failures are data)."""
        client, slave, additional = self.plan(spec)
        c = spec.concurrency
        buffers: List[List[RequestRecord]] = [[] for _ in range(c)]
        started = self.clock.now()
        for epoch in range(spec.epochs):
            barrier = threading.Barrier(c)

            def worker(w: int, epoch=epoch, barrier=barrier):
                barrier.wait()
                buffers[w].append(self._one(client, slave, additional, spec, epoch * c + w,
                                            epoch, w))

            threads = [threading.Thread(target=worker, args=(w,), daemon=True) for w in range(c)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            if epoch + 1 < spec.epochs:
                self.clock.sleep(spec.epoch_gap_s)
        records = sorted((r for b in buffers for r in b), key=lambda r: (r.epoch, r.worker))
        return MetricsRecord(spec, records, started, self.clock.now())

    def run(self, spec: ExperimentSpec) -> MetricsRecord:
        return {"keyrate": self.run_keyrate, "delay": self.run_delay,
                "concurrency": self.run_concurrency}[spec.kind](spec)


def record_from_trace(spec: ExperimentSpec, latencies_ms: Sequence[float]) -> MetricsRecord:
    """Build a record from an injected latency trace, back to back from t=0."""
    t, records = 0.0, []
    for i, lat in enumerate(latencies_ms):
        records.append(RequestRecord(i, 0, 0, t, float(lat), True, spec.key_size_bits or 256))
        t += lat / 1000.0
    return MetricsRecord(spec, records, 0.0, t)
