"""Start QKD pairs and KMSTNs from a configuration bundle.

``Mesh`` runs a whole deployment inside one process, each service on its own
uvicorn server thread and real sockets, which is what the tests and the
benchmark harness use.  ``serve_kmstn`` and ``serve_qkd_pair`` run a single
service in the foreground for multi-host deployments.
"""
from __future__ import annotations

import logging
import ssl
import threading
import time
from pathlib import Path
from typing import Dict, Optional

import uvicorn

from .client import SaeClient, SaeProfile
from .clock import make_clock
from .config import ConfigBundle
from .errors import ConfigError
from .http import TlsFiles, make_http_client
from .keystore import open_keystore
from .node import KmstnNode
from .routing import load_topology
from .service import create_kmstn_app, create_qkd_app
from .simqkd import QkdPair, pair_from_doc

log = logging.getLogger(__name__)


def _tls_files(bundle: ConfigBundle, doc: dict) -> Optional[TlsFiles]:
    settings = bundle.settings
    if settings.get("insecure_sim", True):
        return None
    t = doc.get("tls")
    if not t or "tls" not in settings:
        raise ConfigError(f"{doc.get('kmstn_id') or doc.get('pair_id')}: TLS mesh enabled but no "
                          "certificate configured")
    return TlsFiles(str(bundle.resolve_path(t["cert"])), str(bundle.resolve_path(t["key"])),
                    str(bundle.resolve_path(settings["tls"]["ca"])))


def uvicorn_config(app, host: str, port: int, tls: Optional[TlsFiles]) -> uvicorn.Config:
    kwargs = {}
    if tls is not None:
        kwargs = dict(ssl_certfile=tls.cert, ssl_keyfile=tls.key, ssl_ca_certs=tls.ca,
                      ssl_cert_reqs=ssl.CERT_REQUIRED)
    return uvicorn.Config(app, host=host, port=port, log_level="warning", access_log=False,
                          timeout_keep_alive=30, backlog=1024, **kwargs)


class ServerThread:
    def __init__(self, app, host: str, port: int, tls: Optional[TlsFiles] = None):
        self.server = uvicorn.Server(uvicorn_config(app, host, port, tls))
        self.thread = threading.Thread(target=self.server.run, daemon=True,
                                       name=f"uvicorn-{port}")

    def start(self, timeout: float = 15.0) -> "ServerThread":
        self.thread.start()
        deadline = time.monotonic() + timeout
        while not self.server.started:
            if not self.thread.is_alive() or time.monotonic() > deadline:
                raise RuntimeError(f"server on port {self.server.config.port} failed to start")
            time.sleep(0.01)
        return self

    def stop(self):
        self.server.should_exit = True
        self.thread.join(timeout=10)


def build_kmstn(bundle: ConfigBundle, kmstn_id: str, state_dir, graph=None,
                device_secret_path=None) -> KmstnNode:
    graph = graph or load_topology(bundle)
    doc = bundle.kmstn_doc(kmstn_id)
    settings = bundle.settings
    tls = _tls_files(bundle, doc)
    keystore = open_keystore(state_dir, device_secret_path=device_secret_path,
                             password=doc.get("store_password"))
    return KmstnNode(kmstn_id, graph, keystore, make_http_client(tls), tls=tls is not None,
                     kem_params=doc.get("kem_params", settings["kem_params"]),
                     ack_timeout_s=float(settings["ack_timeout_s"]),
                     supported_extensions=doc.get("supported_extensions", ()))


class Mesh:
    """A whole deployment in-process: every QKD pair and KMSTN of ``bundle``."""

    def __init__(self, bundle: ConfigBundle, state_root, clock=None):
        self.bundle = bundle
        self.state_root = Path(state_root)
        settings = bundle.settings
        self.clock = clock or make_clock(settings["time_mode"])
        self.graph = load_topology(bundle)
        self.pairs: Dict[str, QkdPair] = {}
        self.nodes: Dict[str, KmstnNode] = {}
        self._servers = []
        self._clients = []

    def start(self) -> "Mesh":
        try:
            for doc in self.bundle.qkd_pairs:
                pair = pair_from_doc(doc, self.clock)
                self.pairs[pair.pair_id] = pair
                self._servers.append(ServerThread(create_qkd_app(pair), doc["host"], doc["port"],
                                                  _tls_files(self.bundle, doc)).start())
            for doc in self.bundle.kmstns:
                kid = doc["kmstn_id"]
                node = build_kmstn(self.bundle, kid, self.state_root / kid, self.graph,
                                   self.state_root / "devices" / f"{kid}.secret")
                self.nodes[kid] = node
                node.start()
                self._servers.append(ServerThread(create_kmstn_app(node), doc["host"], doc["port"],
                                                  _tls_files(self.bundle, doc)).start())
        except Exception:
            self.close()
            raise
        return self

    def close(self):
        # drop client connections first: TLS servers otherwise wait on idle keep-alives
        for c in self._clients:
            c.close()
        for node in self.nodes.values():
            node.close()
            node.http.close()
        for s in self._servers:
            s.server.should_exit = True
        for s in self._servers:
            s.thread.join(timeout=10)
        for node in self.nodes.values():
            node.keystore.close()
        self._servers.clear()
        self._clients.clear()

    def __enter__(self) -> "Mesh":
        return self.start()

    def __exit__(self, *exc):
        self.close()

    def node(self, kmstn_id: str) -> KmstnNode:
        return self.nodes[kmstn_id]

    def pair_of(self, kmstn_id: str) -> QkdPair:
        kme = self.graph.nodes[kmstn_id].attached_kmes[0]
        return self.pairs[kme.pair_id]

    def qkd_peer_sae(self, kmstn_id: str) -> str:
        """The far-end QKD SAE id a KMSTN names in its enc_keys path."""
        return self.graph.nodes[kmstn_id].attached_kmes[0].slave_sae_id

    def qkd_own_sae(self, kmstn_id: str) -> str:
        return self.graph.nodes[kmstn_id].attached_kmes[0].master_sae_id

    def client(self, sae_id: str, **kwargs) -> SaeClient:
        kwargs.setdefault("clock", self.clock)
        c = SaeClient(SaeProfile.from_bundle(self.bundle, sae_id), **kwargs)
        self._clients.append(c)
        return c


def serve_kmstn(bundle: ConfigBundle, kmstn_id: str, state_dir) -> None:
    """Run one KMSTN in the foreground until interrupted."""
    doc = bundle.kmstn_doc(kmstn_id)
    node = build_kmstn(bundle, kmstn_id, state_dir).start()
    try:
        uvicorn.Server(uvicorn_config(create_kmstn_app(node), doc["host"], doc["port"],
                                      _tls_files(bundle, doc))).run()
    finally:
        node.close()
        node.keystore.close()


def serve_qkd_pair(bundle: ConfigBundle, pair_id: str) -> None:
    doc = bundle.pair_doc(pair_id)
    pair = pair_from_doc(doc, make_clock(bundle.settings["time_mode"]))
    uvicorn.Server(uvicorn_config(create_qkd_app(pair), doc["host"], doc["port"],
                                  _tls_files(bundle, doc))).run()
