"""SAE-side client library: request keys, fetch relayed keys by id, check status.

Every call is timed (request sent to response received) on the client's
clock and kept in :attr:`SaeClient.records`; the benchmark harness reads
latencies from there.
"""
from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import httpx

from .clock import WallClock
from .config import ConfigBundle
from .errors import ConfigError, InvariantError, KmstnError
from .http import Etsi014Client, TlsFiles, make_http_client
from .model import KeyContainer


@dataclass(frozen=True)
class SaeProfile:
    sae_id: str
    kmstn_url: str
    tls: Optional[TlsFiles] = None

    @classmethod
    def from_dict(cls, doc: dict, base: Optional[Path] = None) -> "SaeProfile":
        try:
            sae_id, url = doc["sae_id"], doc["kmstn_url"]
        except KeyError as exc:
            raise ConfigError(f"SAE profile missing {exc.args[0]!r}") from None
        tls = None
        if doc.get("tls"):
            t = doc["tls"]

            def path(p):
                p = Path(p)
                return str(p if p.is_absolute() or base is None else base / p)
            try:
                tls = TlsFiles(path(t["cert"]), path(t["key"]), path(t["ca"]))
            except KeyError as exc:
                raise ConfigError(f"SAE profile tls section missing {exc.args[0]!r}") from None
        return cls(sae_id, url.rstrip("/"), tls)

    @classmethod
    def from_file(cls, path) -> "SaeProfile":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read SAE profile {path}: {exc}") from None
        return cls.from_dict(doc, path.parent)

    @classmethod
    def from_env(cls) -> "SaeProfile":
        path = os.environ.get("SAE_CONFIG")
        if not path:
            raise ConfigError("SAE_CONFIG is not set")
        return cls.from_file(path)

    @classmethod
    def from_bundle(cls, bundle: ConfigBundle, sae_id: str) -> "SaeProfile":
        sae = bundle.sae_doc(sae_id)
        owner = sae.get("kmstn")
        if owner is None:
            owner = next((d["kmstn_id"] for d in bundle.kmstns
                          if sae_id in d.get("bound_saes", [])), None)
        if owner is None:
            raise ConfigError(f"SAE {sae_id!r} is bound to no KMSTN")
        kdoc = bundle.kmstn_doc(owner)
        settings = bundle.settings
        secure = not settings.get("insecure_sim", True)
        url = f"{'https' if secure else 'http'}://{kdoc['host']}:{kdoc['port']}"
        tls = None
        if secure:
            t = sae.get("tls") or {}
            if not t or "tls" not in settings:
                raise ConfigError(f"SAE {sae_id!r} has no certificate for the TLS mesh")
            tls = TlsFiles(str(bundle.resolve_path(t["cert"])), str(bundle.resolve_path(t["key"])),
                           str(bundle.resolve_path(settings["tls"]["ca"])))
        return cls(sae_id, url, tls)

    def to_dict(self) -> dict:
        doc = {"sae_id": self.sae_id, "kmstn_url": self.kmstn_url}
        if self.tls is not None:
            doc["tls"] = {"cert": self.tls.cert, "key": self.tls.key, "ca": self.tls.ca}
        return doc


@dataclass(frozen=True)
class CallRecord:
    op: str
    sent_at: float
    latency_ms: float
    ok: bool
    n_keys: int = 0
    bits: int = 0
    error: Optional[str] = None


class SaeClient:
    """Thread-safe; many workers may share one client."""

    def __init__(self, profile: SaeProfile, http: Optional[httpx.Client] = None,
                 timeout: float = 30.0, clock=None):
        self.profile = profile
        self._own_http = http is None
        self.http = http or make_http_client(profile.tls, timeout=timeout)
        self.clock = clock or WallClock()
        self.api = Etsi014Client(profile.kmstn_url, self.http, profile.sae_id)
        self._lock = threading.Lock()
        self.records: List[CallRecord] = []

    def close(self):
        if self._own_http:
            self.http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _timed(self, op: str, fn):
        t0 = self.clock.now()
        try:
            result = fn()
        except KmstnError as exc:
            self._record(CallRecord(op, t0, self._elapsed_ms(t0), False, error=exc.code))
            raise
        n_keys = len(result.keys) if isinstance(result, KeyContainer) else 0
        bits = sum(k.size_bits for k in result.keys) if isinstance(result, KeyContainer) else 0
        self._record(CallRecord(op, t0, self._elapsed_ms(t0), True, n_keys, bits))
        return result

    def _elapsed_ms(self, t0: float) -> float:
        return max(0.0, (self.clock.now() - t0) * 1000.0)

    def _record(self, rec: CallRecord):
        with self._lock:
            self.records.append(rec)

    def get_key(self, slave_sae: str, number: int = 1, size: Optional[int] = None,
                additional_slave_saes: Sequence[str] = ()) -> KeyContainer:
        if number < 1:
            raise InvariantError("number must be at least 1")
        return self._timed("get_key", lambda: self.api.enc_keys(
            slave_sae, number, size, additional_slave_saes))

    def get_key_with_ids(self, origin_slave_sae: str, key_ids: Sequence[str]) -> KeyContainer:
        key_ids = list(key_ids)
        if not key_ids:
            raise InvariantError("at least one key id is required")
        return self._timed("get_key_with_ids",
                           lambda: self.api.dec_keys(origin_slave_sae, key_ids))

    def status(self, slave_sae: str) -> dict:
        return self._timed("status", lambda: self.api.status(slave_sae))
