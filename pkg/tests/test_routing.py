import math
import random

import pytest

from graphs import brute_force_min, make_graph, random_connected
from kmstn.config import chain_bundle
from kmstn.errors import AmbiguousBinding, ConfigError, UnknownSae, Unreachable
from kmstn.routing import load_topology, resolve_destination, route_fallback

PORTS = list(range(40000, 40100))


@pytest.fixture
def chain():
    return load_topology(chain_bundle(4, ports=PORTS))


def test_chain_shape(chain):
    assert len(chain.nodes) == 8 and len(chain.edges) == 7
    qkd = sorted(tuple(sorted((e.a, e.b))) for e in chain.edges.values() if e.qkd_link)
    assert qkd == [("kmstn1", "kmstn2"), ("kmstn3", "kmstn4"), ("kmstn5", "kmstn6"),
                   ("kmstn7", "kmstn8")]
    assert chain.next_hop[("kmstn1", "kmstn8")] == "kmstn2"
    assert chain.next_hop[("kmstn8", "kmstn1")] == "kmstn7"
    assert chain.path("kmstn1", "kmstn8") == [f"kmstn{i}" for i in range(1, 9)]
    assert chain.qkd_kme("kmstn1", "kmstn2").slave_sae_id == "qkdsae2"
    assert chain.qkd_kme("kmstn2", "kmstn3") is None


def test_resolve_destination(chain):
    assert resolve_destination(chain, "sae8") == "kmstn8"
    with pytest.raises(UnknownSae):
        resolve_destination(chain, "nobody")


def test_ambiguous_binding():
    b = chain_bundle(1, ports=PORTS)
    b.kmstns[1]["bound_saes"].append("sae1")
    with pytest.raises(AmbiguousBinding):
        resolve_destination(load_topology(b), "sae1")


@pytest.mark.parametrize("mutate", [
    lambda b: b.edges.append({"a": "kmstn1", "b": "kmstn9"}),
    lambda b: b.edges.append({"a": "kmstn1", "b": "kmstn1"}),
    lambda b: b.edges.append({"a": "kmstn2", "b": "kmstn1"}),
    lambda b: b.edges.append({"a": "kmstn1", "b": "kmstn3", "weight": 0}),
    lambda b: b.edges.append({"a": "kmstn1", "b": "kmstn3", "weight": -2}),
    lambda b: b.edges.__setitem__(1, {**b.edges[1], "qkd_link": True}),
    lambda b: b.kmstns[1]["kmes"].append("kme1"),
    lambda b: b.kmstns[0]["kmes"].append("kme99"),
    lambda b: b.kmstns.append(dict(b.kmstns[0])),
    lambda b: b.saes.append({"sae_id": "stray"}),
])
def test_config_errors(mutate):
    b = chain_bundle(2, ports=PORTS)
    mutate(b)
    with pytest.raises(ConfigError):
        load_topology(b)


def test_disconnected_is_unreachable():
    g = make_graph(4, [(0, 1, 1), (2, 3, 1)])
    assert not g.reachable("n0", "n3")
    with pytest.raises(Unreachable):
        g.path("n0", "n3")
    with pytest.raises(Unreachable):
        route_fallback(g, "n0", "n3")


def test_tie_break_lexicographic():
    # diamond: n0 -> n1 -> n3 and n0 -> n2 -> n3 cost the same
    g = make_graph(4, [(0, 1, 1), (0, 2, 1), (1, 3, 1), (2, 3, 1)])
    assert g.next_hop[("n0", "n3")] == "n1"
    assert g.next_hop[("n3", "n0")] == "n1"


def test_weights_steer_route():
    g = make_graph(4, [(0, 1, 5), (0, 2, 1), (1, 3, 1), (2, 3, 1)])
    assert g.path("n0", "n3") == ["n0", "n2", "n3"]
    assert route_fallback(g, "n0", "n3") == ["n0", "n2", "n3"]


def test_complete_graph_direct_edges():
    n = 6
    g = make_graph(n, [(a, b, 1) for a in range(n) for b in range(a + 1, n)])
    for a in range(n):
        for b in range(n):
            if a != b:
                assert g.path(f"n{a}", f"n{b}") == [f"n{a}", f"n{b}"]


def test_random_graphs_match_exhaustive_search():
    rng = random.Random(2024)
    for _ in range(100):
        g = random_connected(rng)
        for s in g.nodes:
            for d in g.nodes:
                if s == d:
                    continue
                oracle = brute_force_min(g, s, d)
                assert g.path_cost(g.path(s, d)) == oracle
                assert g.path_cost(route_fallback(g, s, d)) == oracle


def test_non_dyadic_weights_agree_to_rounding():
    rng = random.Random(99)
    for _ in range(50):
        g = random_connected(rng, dyadic=False)
        for s in g.nodes:
            for d in g.nodes:
                if s != d:
                    oracle = brute_force_min(g, s, d)
                    assert math.isclose(g.path_cost(g.path(s, d)), oracle, rel_tol=1e-12)
                    assert math.isclose(g.path_cost(route_fallback(g, s, d)), oracle,
                                        rel_tol=1e-12)
