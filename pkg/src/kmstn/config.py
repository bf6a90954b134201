"""Configuration documents for a mesh deployment.

A configuration directory holds::

    mesh.json            deployment-wide settings (optional)
    qkd/<pair>.json      one simulated QKD pair: endpoint, two KME faces, link profile
    kmstns/<id>.json     one KMSTN: service and PQC endpoints, attached KMEs, bound SAEs
    saes/<id>.json       one SAE client profile
    edges.json           overlay edges {"edges": [{"a", "b", "qkd_link", "weight"}]}

Every host of a deployment carries the same directory so all KMSTNs share one
view of the topology.
"""
from __future__ import annotations

import json
import random
import socket
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .errors import ConfigError

# below the Linux default ephemeral range (32768-60999)
_PORT_LO, _PORT_HI = 20000, 32000

DEFAULT_MESH = {
    "insecure_sim": True,
    "time_mode": "wall",
    "kem_params": "ML-KEM-768",
    "ack_timeout_s": 30.0,
}


@dataclass
class ConfigBundle:
    mesh: dict = field(default_factory=dict)
    qkd_pairs: List[dict] = field(default_factory=list)
    kmstns: List[dict] = field(default_factory=list)
    saes: List[dict] = field(default_factory=list)
    edges: List[dict] = field(default_factory=list)
    root: Optional[Path] = None

    @property
    def settings(self) -> dict:
        return {**DEFAULT_MESH, **self.mesh}

    def resolve_path(self, value: Optional[str]) -> Optional[Path]:
        if value is None:
            return None
        p = Path(value)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def kmstn_doc(self, kmstn_id: str) -> dict:
        for doc in self.kmstns:
            if doc.get("kmstn_id") == kmstn_id:
                return doc
        raise ConfigError(f"no KMSTN named {kmstn_id!r}")

    def sae_doc(self, sae_id: str) -> dict:
        for doc in self.saes:
            if doc.get("sae_id") == sae_id:
                return doc
        raise ConfigError(f"no SAE named {sae_id!r}")

    def pair_doc(self, pair_id: str) -> dict:
        for doc in self.qkd_pairs:
            if doc.get("pair_id") == pair_id:
                return doc
        raise ConfigError(f"no QKD pair named {pair_id!r}")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


def load_config_dir(path) -> ConfigBundle:
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    bundle = ConfigBundle(root=root)
    if (root / "mesh.json").exists():
        bundle.mesh = _read_json(root / "mesh.json")
    for sub, target in (("qkd", bundle.qkd_pairs), ("kmstns", bundle.kmstns), ("saes", bundle.saes)):
        for f in sorted((root / sub).glob("*.json")) if (root / sub).is_dir() else []:
            target.append(_read_json(f))
    if (root / "edges.json").exists():
        edges = _read_json(root / "edges.json")
        bundle.edges = edges.get("edges", []) if isinstance(edges, dict) else edges
    return bundle


def write_config_dir(bundle: ConfigBundle, path) -> Path:
    root = Path(path)
    for sub in ("qkd", "kmstns", "saes"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    def dump(p: Path, obj):
        p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    dump(root / "mesh.json", bundle.mesh)
    for doc in bundle.qkd_pairs:
        dump(root / "qkd" / f"{doc['pair_id']}.json", doc)
    for doc in bundle.kmstns:
        dump(root / "kmstns" / f"{doc['kmstn_id']}.json", doc)
    for doc in bundle.saes:
        dump(root / "saes" / f"{doc['sae_id']}.json", doc)
    dump(root / "edges.json", {"edges": bundle.edges})
    bundle.root = root
    return root


def free_ports(n: int, host: str = "127.0.0.1") -> List[int]:
    """Find ``n`` distinct bindable ports (released before returning).

    Ports come from below the usual ephemeral range so that outgoing
    connections made while a mesh starts cannot take them first.
    """
    rng = random.Random()
    socks, ports = [], []
    try:
        for _ in range(50 * n):
            if len(ports) == n:
                break
            port = rng.randrange(_PORT_LO, _PORT_HI)
            if port in ports:
                continue
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            try:
                s.bind((host, port))
            except OSError:
                s.close()
                continue
            socks.append(s)
            ports.append(port)
        while len(ports) < n:
            s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            s.bind((host, 0))
            socks.append(s)
            ports.append(s.getsockname()[1])
    finally:
        for s in socks:
            s.close()
    return ports


def default_profile(**overrides) -> dict:
    profile = {
        "mean_skr_bps": 2500.0,
        "block_size_bits": 256,
        "blocks_per_burst": 8,
        "buffer_capacity_keys": 1000,
        "service_latency_ms": {"dist": "lognormal", "median": 5.0, "sigma": 0.25},
    }
    profile.update(overrides)
    return profile


def chain_bundle(n_islands: int = 4, host: str = "127.0.0.1",
                 profiles: Optional[Dict[int, dict]] = None, seed: int = 1,
                 mesh: Optional[dict] = None, ports: Optional[Sequence[int]] = None) -> ConfigBundle:
    """Linear chain of QKD islands: kmstn1 =Q= kmstn2 -P- kmstn3 =Q= kmstn4 ...

    Island ``i`` (0-based) pairs kmstn{2i+1} and kmstn{2i+2} over one simulated
    QKD link; neighbouring islands are joined by PQC-only edges.  Each KMSTN
    binds one application SAE ``sae{n}``.  ``profiles`` maps island index to
    link-profile overrides.
    """
    n_nodes = 2 * n_islands
    ports = list(ports) if ports is not None else free_ports(n_islands + 2 * n_nodes, host)
    it = iter(ports)
    profiles = profiles or {}
    bundle = ConfigBundle(mesh={**DEFAULT_MESH, **(mesh or {})})
    for i in range(n_islands):
        a, b = 2 * i + 1, 2 * i + 2
        bundle.qkd_pairs.append({
            "pair_id": f"qkd{a}{b}",
            "host": host,
            "port": next(it),
            "faces": [{"kme_id": f"kme{a}", "sae_id": f"qkdsae{a}"},
                      {"kme_id": f"kme{b}", "sae_id": f"qkdsae{b}"}],
            "profile": default_profile(**profiles.get(i, {})),
            "seed": seed * 1000 + i,
        })
    for n in range(1, n_nodes + 1):
        bundle.kmstns.append({
            "kmstn_id": f"kmstn{n}",
            "host": host,
            "port": next(it),
            "pqc_port": next(it),
            "kmes": [f"kme{n}"],
            "bound_saes": [f"sae{n}"],
        })
        kdoc = bundle.kmstns[-1]
        bundle.saes.append({"sae_id": f"sae{n}", "kmstn": f"kmstn{n}",
                            "kmstn_url": f"http://{host}:{kdoc['port']}"})
    for n in range(1, n_nodes):
        bundle.edges.append({"a": f"kmstn{n}", "b": f"kmstn{n + 1}", "qkd_link": n % 2 == 1,
                             "weight": 1})
    return bundle
