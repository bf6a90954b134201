"""KMS overlay graph: topology validation, next-hop tables and on-demand routes.

Next hops are precomputed with Dijkstra (one run per destination) when the
graph is loaded.  Ties between equal-cost next hops go to the
lexicographically smallest KMSTN id.  ``route_fallback`` answers single
queries with A*, using ``hop-count lower bound * minimum edge weight`` as the
heuristic; it is admissible and consistent, so A* returns optimal paths.
"""
from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple
from urllib.parse import urlsplit

from .config import ConfigBundle
from .errors import AmbiguousBinding, ConfigError, UnknownSae, Unreachable

# relative slack when matching float path costs during next-hop selection
_COST_RTOL = 1e-12


@dataclass(frozen=True)
class Endpoint:
    host: str
    port: int

    def __post_init__(self):
        if not isinstance(self.host, str) or not self.host:
            raise ConfigError(f"bad host {self.host!r}")
        if not isinstance(self.port, int) or not 0 < self.port < 65536:
            raise ConfigError(f"bad port {self.port!r}")

    def url(self, tls: bool) -> str:
        return f"{'https' if tls else 'http'}://{self.host}:{self.port}"

    @property
    def address(self) -> Tuple[str, int]:
        return self.host, self.port


@dataclass(frozen=True)
class AttachedKme:
    kme_id: str
    master_sae_id: str   # this KMSTN's identity on the QKD link
    slave_sae_id: str    # the identity of the far end of the link
    endpoint: Endpoint
    pair_id: str
    peer_kme_id: str


@dataclass(frozen=True)
class KmsNode:
    kmstn_id: str
    service_endpoint: Endpoint
    pqc_endpoint: Endpoint
    attached_kmes: Tuple[AttachedKme, ...] = ()
    bound_master_saes: Tuple[str, ...] = ()


@dataclass(frozen=True)
class KmsEdge:
    a: str
    b: str
    qkd_link: bool = False
    weight: float = 1.0

    def __post_init__(self):
        if self.a == self.b:
            raise ConfigError(f"self-loop edge on {self.a!r}")
        if not (isinstance(self.weight, (int, float)) and self.weight > 0
                and math.isfinite(self.weight)):
            raise ConfigError(f"edge {self.a}-{self.b} needs a positive weight")
        if self.b < self.a:
            a, b = self.b, self.a
            object.__setattr__(self, "a", a)
            object.__setattr__(self, "b", b)

    @property
    def key(self) -> FrozenSet[str]:
        return frozenset((self.a, self.b))

    def other(self, n: str) -> str:
        return self.b if n == self.a else self.a


@dataclass(frozen=True)
class KmsGraph:
    nodes: Mapping[str, KmsNode]
    edges: Mapping[FrozenSet[str], KmsEdge]
    next_hop: Mapping[Tuple[str, str], str] = field(default_factory=dict)

    def neighbors(self, n: str) -> List[Tuple[str, KmsEdge]]:
        return sorted(((e.other(n), e) for e in self.edges.values() if n in (e.a, e.b)),
                      key=lambda t: t[0])

    def edge(self, a: str, b: str) -> Optional[KmsEdge]:
        return self.edges.get(frozenset((a, b)))

    @property
    def min_weight(self) -> float:
        return min((e.weight for e in self.edges.values()), default=1.0)

    def path(self, src: str, dst: str) -> List[str]:
        """Follow the next-hop table from ``src`` to ``dst``."""
        if src not in self.nodes or dst not in self.nodes:
            raise Unreachable(f"unknown KMSTN in {src!r} -> {dst!r}")
        hops = [src]
        while hops[-1] != dst:
            nxt = self.next_hop.get((hops[-1], dst))
            if nxt is None or len(hops) > len(self.nodes):
                raise Unreachable(f"no route from {src} to {dst}")
            hops.append(nxt)
        return hops

    def path_cost(self, path: Iterable[str]) -> float:
        path = list(path)
        return math.fsum(self.edge(a, b).weight for a, b in zip(path, path[1:]))

    def reachable(self, src: str, dst: str) -> bool:
        return src == dst or (src, dst) in self.next_hop

    def qkd_kme(self, src: str, dst: str) -> Optional[AttachedKme]:
        """The KME at ``src`` whose QKD link ends at ``dst``, if the edge is a QKD link."""
        edge = self.edge(src, dst)
        if edge is None or not edge.qkd_link:
            return None
        peer_kmes = {k.kme_id for k in self.nodes[dst].attached_kmes}
        for kme in self.nodes[src].attached_kmes:
            if kme.peer_kme_id in peer_kmes:
                return kme
        return None

    def qkd_partner(self, kmstn_id: str, kme: AttachedKme) -> Optional[str]:
        for node in self.nodes.values():
            if node.kmstn_id != kmstn_id and any(k.kme_id == kme.peer_kme_id
                                                 for k in node.attached_kmes):
                return node.kmstn_id
        return None

    def kmstn_for_url(self, url: str) -> Optional[str]:
        parts = urlsplit(url)
        for node in self.nodes.values():
            ep = node.service_endpoint
            if parts.hostname == ep.host and parts.port == ep.port:
                return node.kmstn_id
        return None


def _endpoint(doc: dict, port_key: str, what: str) -> Endpoint:
    try:
        return Endpoint(doc["host"], doc[port_key])
    except KeyError as exc:
        raise ConfigError(f"{what}: missing {exc.args[0]!r}") from None


def load_topology(bundle: ConfigBundle) -> KmsGraph:
    """Validate a configuration bundle and build the routed overlay graph."""
    faces: Dict[str, Tuple[str, dict, dict, Endpoint]] = {}
    for pair in bundle.qkd_pairs:
        pid = pair.get("pair_id")
        fs = pair.get("faces", [])
        if not pid or len(fs) != 2:
            raise ConfigError(f"QKD pair {pid!r} must have an id and exactly two faces")
        ep = _endpoint(pair, "port", f"QKD pair {pid}")
        for i, face in enumerate(fs):
            kid = face.get("kme_id")
            if not kid or not face.get("sae_id"):
                raise ConfigError(f"QKD pair {pid}: face needs kme_id and sae_id")
            if kid in faces:
                raise ConfigError(f"duplicate kme_id {kid!r}")
            faces[kid] = (pid, face, fs[1 - i], ep)

    nodes: Dict[str, KmsNode] = {}
    kme_owner: Dict[str, str] = {}
    for doc in bundle.kmstns:
        kid = doc.get("kmstn_id")
        if not kid:
            raise ConfigError("KMSTN document without kmstn_id")
        if kid in nodes:
            raise ConfigError(f"duplicate kmstn_id {kid!r}")
        attached = []
        for kme_id in doc.get("kmes", []):
            if kme_id not in faces:
                raise ConfigError(f"{kid}: unknown KME {kme_id!r}")
            if kme_id in kme_owner:
                raise ConfigError(f"KME {kme_id!r} attached to both {kme_owner[kme_id]} and {kid}")
            kme_owner[kme_id] = kid
            pid, face, peer, ep = faces[kme_id]
            attached.append(AttachedKme(kme_id, face["sae_id"], peer["sae_id"], ep, pid,
                                        peer["kme_id"]))
        nodes[kid] = KmsNode(kid, _endpoint(doc, "port", kid), _endpoint(doc, "pqc_port", kid),
                             tuple(attached), tuple(doc.get("bound_saes", [])))

    edges: Dict[FrozenSet[str], KmsEdge] = {}
    for e in bundle.edges:
        try:
            edge = KmsEdge(e["a"], e["b"], bool(e.get("qkd_link", False)), e.get("weight", 1))
        except KeyError as exc:
            raise ConfigError(f"edge missing {exc.args[0]!r}") from None
        for end in (edge.a, edge.b):
            if end not in nodes:
                raise ConfigError(f"edge {edge.a}-{edge.b} names unknown node {end!r}")
        if edge.key in edges:
            raise ConfigError(f"duplicate edge {edge.a}-{edge.b}")
        edges[edge.key] = edge

    graph = KmsGraph(nodes, edges)
    for edge in edges.values():
        if edge.qkd_link and (graph.qkd_kme(edge.a, edge.b) is None
                              or graph.qkd_kme(edge.b, edge.a) is None):
            raise ConfigError(f"edge {edge.a}-{edge.b} is marked qkd_link but the nodes do not "
                              "share a QKD pair")

    bound = {s for n in nodes.values() for s in n.bound_master_saes}
    for sae in bundle.saes:
        if sae.get("sae_id") not in bound:
            raise ConfigError(f"SAE {sae.get('sae_id')!r} is bound to no KMSTN")
    return KmsGraph(nodes, edges, compute_routes(graph))


def _dijkstra(graph: KmsGraph, source: str) -> Dict[str, float]:
    dist = {source: 0.0}
    heap = [(0.0, source)]
    done = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for v, e in graph.neighbors(u):
            nd = d + e.weight
            if nd < dist.get(v, math.inf):
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def compute_routes(graph: KmsGraph) -> Dict[Tuple[str, str], str]:
    """All-pairs next-hop table, one Dijkstra run per destination."""
    table: Dict[Tuple[str, str], str] = {}
    adj = {n: graph.neighbors(n) for n in graph.nodes}
    for dst in sorted(graph.nodes):
        dist = _dijkstra(graph, dst)
        for src, d_src in dist.items():
            if src == dst:
                continue
            slack = _COST_RTOL * max(d_src, 1.0)
            # neighbours come sorted by id, so the first match is the tie-break winner
            for n, e in adj[src]:
                if n in dist and e.weight + dist[n] <= d_src + slack:
                    table[(src, dst)] = n
                    break
    return table


def _hop_bounds(graph: KmsGraph, dst: str) -> Dict[str, int]:
    hops = {dst: 0}
    queue = deque([dst])
    while queue:
        u = queue.popleft()
        for v, _ in graph.neighbors(u):
            if v not in hops:
                hops[v] = hops[u] + 1
                queue.append(v)
    return hops


def route_fallback(graph: KmsGraph, src: str, dst: str) -> List[str]:
    """A* from ``src`` to ``dst``; raises Unreachable when no path exists."""
    if src not in graph.nodes or dst not in graph.nodes:
        raise Unreachable(f"unknown KMSTN in {src!r} -> {dst!r}")
    if src == dst:
        return [src]
    hops = _hop_bounds(graph, dst)
    if src not in hops:
        raise Unreachable(f"no route from {src} to {dst}")
    w_min = graph.min_weight

    def h(n: str) -> float:
        return hops.get(n, 0) * w_min

    g = {src: 0.0}
    parent: Dict[str, str] = {}
    heap = [(h(src), 0.0, src)]
    closed = set()
    while heap:
        _, gu, u = heapq.heappop(heap)
        if u in closed:
            continue
        if u == dst:
            path = [u]
            while path[-1] != src:
                path.append(parent[path[-1]])
            return path[::-1]
        closed.add(u)
        for v, e in graph.neighbors(u):
            if v in closed or v not in hops:
                continue
            gv = gu + e.weight
            if gv < g.get(v, math.inf):
                g[v] = gv
                parent[v] = u
                heapq.heappush(heap, (gv + h(v), gv, v))
    raise Unreachable(f"no route from {src} to {dst}")


def resolve_destination(graph: KmsGraph, dst_sae: str) -> str:
    """The single KMSTN that binds ``dst_sae`` as a master SAE."""
    owners = sorted(n.kmstn_id for n in graph.nodes.values() if dst_sae in n.bound_master_saes)
    if not owners:
        raise UnknownSae(f"SAE {dst_sae!r} is bound to no KMSTN")
    if len(owners) > 1:
        raise AmbiguousBinding(f"SAE {dst_sae!r} is bound at {owners}")
    return owners[0]
