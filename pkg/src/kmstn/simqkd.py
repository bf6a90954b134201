"""Simulated QKD link: two mirrored KME faces fed by bursty key generation.

Bursts of ``blocks_per_burst`` blocks arrive with exponential inter-arrival
times whose mean makes the long-run rate equal ``mean_skr_bps``.  Generation
is evaluated lazily against the clock whenever a face is touched, which is
observationally the same as a background generator and lets simulated time
jump ahead.  When the buffer is full the generator is stalled: bursts that
arrive then produce only what fits, and existing keys are never dropped.

Each face serves requests one at a time after a sampled service latency, so
concurrent callers queue behind each other.
"""
from __future__ import annotations

import math
import random
import threading
import uuid
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from .clock import WallClock
from .errors import Depleted, InvariantError, KeyNotPresent, UnknownSae
from .model import KeyBlock, KeyContainer


@dataclass(frozen=True)
class LatencyDist:
    dist: str = "constant"
    median: float = 0.0
    sigma: float = 0.0
    mean: float = 0.0
    value: float = 0.0

    @classmethod
    def from_spec(cls, spec) -> "LatencyDist":
        if spec is None:
            return cls()
        if isinstance(spec, (int, float)):
            return cls("constant", value=float(spec))
        if isinstance(spec, LatencyDist):
            return spec
        kind = spec.get("dist", "constant")
        if kind == "lognormal":
            return cls("lognormal", median=float(spec["median"]), sigma=float(spec.get("sigma", 0.0)))
        if kind == "exponential":
            return cls("exponential", mean=float(spec["mean"]))
        if kind == "constant":
            return cls("constant", value=float(spec.get("value", 0.0)))
        raise InvariantError(f"unknown latency distribution {kind!r}")

    def to_spec(self) -> dict:
        if self.dist == "lognormal":
            return {"dist": "lognormal", "median": self.median, "sigma": self.sigma}
        if self.dist == "exponential":
            return {"dist": "exponential", "mean": self.mean}
        return {"dist": "constant", "value": self.value}

    def sample_ms(self, rng: random.Random) -> float:
        if self.dist == "lognormal":
            return self.median * math.exp(self.sigma * rng.gauss(0.0, 1.0)) if self.median > 0 else 0.0
        if self.dist == "exponential":
            return rng.expovariate(1.0 / self.mean) if self.mean > 0 else 0.0
        return self.value


@dataclass(frozen=True)
class LinkProfile:
    mean_skr_bps: float
    block_size_bits: int = 256
    blocks_per_burst: int = 8
    buffer_capacity_keys: int = 1000
    service_latency_ms: LatencyDist = field(default_factory=LatencyDist)

    def __post_init__(self):
        if self.mean_skr_bps <= 0:
            raise InvariantError("mean_skr_bps must be positive")
        if self.block_size_bits <= 0 or self.block_size_bits % 8:
            raise InvariantError("block_size_bits must be a positive multiple of 8")
        if self.blocks_per_burst <= 0 or self.buffer_capacity_keys <= 0:
            raise InvariantError("blocks_per_burst and buffer_capacity_keys must be positive")
        object.__setattr__(self, "service_latency_ms", LatencyDist.from_spec(self.service_latency_ms))

    @property
    def mean_interarrival_s(self) -> float:
        return self.block_size_bits * self.blocks_per_burst / self.mean_skr_bps

    @classmethod
    def from_dict(cls, d: dict) -> "LinkProfile":
        return cls(
            mean_skr_bps=float(d["mean_skr_bps"]),
            block_size_bits=int(d.get("block_size_bits", 256)),
            blocks_per_burst=int(d.get("blocks_per_burst", 8)),
            buffer_capacity_keys=int(d.get("buffer_capacity_keys", 1000)),
            service_latency_ms=LatencyDist.from_spec(d.get("service_latency_ms")),
        )

    def to_dict(self) -> dict:
        return {
            "mean_skr_bps": self.mean_skr_bps,
            "block_size_bits": self.block_size_bits,
            "blocks_per_burst": self.blocks_per_burst,
            "buffer_capacity_keys": self.buffer_capacity_keys,
            "service_latency_ms": self.service_latency_ms.to_spec(),
        }


@dataclass
class QkdFace:
    kme_id: str
    sae_id: str
    store: "OrderedDict[str, bytes]" = field(default_factory=OrderedDict, repr=False)
    issued: "OrderedDict[str, bytes]" = field(default_factory=OrderedDict, repr=False)


class QkdPair:
    """One simulated QKD link with its two KMEs (faces ``a`` and ``b``)."""

    def __init__(self, pair_id: str, profile: LinkProfile, faces: Sequence[dict],
                 seed: Optional[int] = None, clock=None, issued_capacity: Optional[int] = None):
        if len(faces) != 2:
            raise InvariantError("a QKD pair has exactly two faces")
        self.pair_id = pair_id
        self.profile = profile
        self.faces = [QkdFace(f["kme_id"], f["sae_id"]) for f in faces]
        if self.faces[0].sae_id == self.faces[1].sae_id:
            raise InvariantError("the two faces need distinct SAE ids")
        self.seed = seed
        self.clock = clock or WallClock()
        self.issued_capacity = issued_capacity or 10 * profile.buffer_capacity_keys
        self._gen_rng = random.Random(seed) if seed is not None else random.SystemRandom()
        self._lat_rng = random.Random(f"{seed}/latency") if seed is not None else random.SystemRandom()
        self._lock = threading.Lock()
        self.paused = False
        self.generated_blocks = 0
        self.request_log: List[dict] = []
        self.served = 0
        self.depleted = 0
        self._t0 = self.clock.now()
        self._next_burst = self._t0 + self._interarrival()

    # -- generation
    def _interarrival(self) -> float:
        return self._gen_rng.expovariate(1.0 / self.profile.mean_interarrival_s)

    def _new_block(self) -> KeyBlock:
        kid = str(uuid.UUID(int=self._gen_rng.getrandbits(128), version=4))
        return KeyBlock(kid, self._gen_rng.randbytes(self.profile.block_size_bits // 8))

    def _advance_locked(self, now: float) -> None:
        a, b = self.faces
        cap = self.profile.buffer_capacity_keys
        while self._next_burst <= now:
            room = 0 if self.paused else cap - len(a.store)
            for _ in range(min(room, self.profile.blocks_per_burst)):
                blk = self._new_block()
                a.store[blk.key_id] = blk.key_material
                b.store[blk.key_id] = blk.key_material
                self.generated_blocks += 1
            self._next_burst += self._interarrival()

    def refresh(self) -> None:
        with self._lock:
            self._advance_locked(self.clock.now())

    @property
    def generated_bits(self) -> int:
        return self.generated_blocks * self.profile.block_size_bits

    @property
    def elapsed(self) -> float:
        return self.clock.now() - self._t0

    def pause(self):
        with self._lock:
            self._advance_locked(self.clock.now())
            self.paused = True

    def resume(self):
        with self._lock:
            self._advance_locked(self.clock.now())
            self.paused = False

    def fill(self, n: Optional[int] = None) -> int:
        """Top the buffer up immediately (test and warm-up helper)."""
        with self._lock:
            a, b = self.faces
            n = self.profile.buffer_capacity_keys - len(a.store) if n is None else n
            n = min(n, self.profile.buffer_capacity_keys - len(a.store))
            for _ in range(n):
                blk = self._new_block()
                a.store[blk.key_id] = blk.key_material
                b.store[blk.key_id] = blk.key_material
                self.generated_blocks += 1
            return n

    # -- faces
    def face(self, sae_id: str) -> QkdFace:
        for f in self.faces:
            if f.sae_id == sae_id:
                return f
        raise UnknownSae(f"SAE {sae_id!r} is not an end of QKD pair {self.pair_id}")

    def other(self, face: QkdFace) -> QkdFace:
        return self.faces[1] if face is self.faces[0] else self.faces[0]

    def _serve_latency_locked(self):
        self.clock.sleep(self.profile.service_latency_ms.sample_ms(self._lat_rng) / 1000.0)

    def _check_size(self, size: Optional[int]) -> int:
        block = self.profile.block_size_bits
        size = block if size is None else int(size)
        if size <= 0 or size % 8:
            raise InvariantError("size must be a positive multiple of 8")
        if size > block:
            raise InvariantError(f"size {size} exceeds the block size {block}")
        return size

    # -- ETSI 014 operations
    def enc_keys(self, slave_sae_id: str, number: int = 1, size: Optional[int] = None) -> KeyContainer:
        """Pop ``number`` keys at the master face for delivery to ``slave_sae_id``."""
        target = self.face(slave_sae_id)
        source = self.other(target)
        size = self._check_size(size)
        if number < 1 or number > self.profile.buffer_capacity_keys:
            raise InvariantError(f"number must be in [1, {self.profile.buffer_capacity_keys}]")
        with self._lock:
            self.request_log.append({"op": "enc_keys", "sae": slave_sae_id,
                                     "body": {"number": number, "size": size}})
            self._serve_latency_locked()
            self._advance_locked(self.clock.now())
            if len(source.store) < number:
                self.depleted += 1
                raise Depleted(f"QKD pair {self.pair_id}: {len(source.store)} keys buffered, "
                               f"{number} requested")
            keys = []
            for _ in range(number):
                kid, material = source.store.popitem(last=False)
                target.store.pop(kid, None)
                material = material[: size // 8]
                target.issued[kid] = material
                keys.append(KeyBlock(kid, material))
            while len(target.issued) > self.issued_capacity:
                target.issued.popitem(last=False)
            self.served += 1
        return KeyContainer(tuple(keys))

    def dec_keys(self, master_sae_id: str, key_ids: Sequence[str]) -> KeyContainer:
        """Return keys previously issued at ``master_sae_id``'s face, from the other face."""
        source = self.face(master_sae_id)
        target = self.other(source)
        if not key_ids:
            raise InvariantError("key_IDs must not be empty")
        with self._lock:
            self.request_log.append({"op": "dec_keys", "sae": master_sae_id,
                                     "body": {"key_IDs": list(key_ids)}})
            self._serve_latency_locked()
            missing = [k for k in key_ids if k not in target.issued]
            if missing:
                raise KeyNotPresent(f"unknown key IDs: {missing}", {"missing": missing})
            return KeyContainer(tuple(KeyBlock(k, target.issued[k]) for k in key_ids))

    def status(self, slave_sae_id: str) -> Dict:
        target = self.face(slave_sae_id)
        source = self.other(target)
        with self._lock:
            self._advance_locked(self.clock.now())
            stored = len(source.store)
        block = self.profile.block_size_bits
        return {
            "source_KME_ID": source.kme_id,
            "target_KME_ID": target.kme_id,
            "master_SAE_ID": source.sae_id,
            "slave_SAE_ID": target.sae_id,
            "key_size": block,
            "stored_key_count": stored,
            "max_key_count": self.profile.buffer_capacity_keys,
            "max_key_per_request": self.profile.buffer_capacity_keys,
            "max_key_size": block,
            "min_key_size": 8,
            "max_SAE_ID_count": 0,
        }

    def mirror_consistent(self) -> bool:
        with self._lock:
            a, b = self.faces
            return list(a.store.items()) == list(b.store.items())


def pair_from_doc(doc: dict, clock=None) -> QkdPair:
    return QkdPair(doc["pair_id"], LinkProfile.from_dict(doc["profile"]), doc["faces"],
                   seed=doc.get("seed"), clock=clock)
