"""
Tests for multi-hop session graph construction and batch encoding.
"""

import itertools

import numpy as np
import pytest

from app.core.exceptions import DataError
from app.schemas.events import PAD, PredictionInstance
from app.services.session_graphs import (
    build_1hop,
    build_graphs,
    compose_hops,
    encode_batch,
    normalized_adjacency,
)

SEQ = [758, 184, 20, 88, 184, 302, 88, 184]


def walk_oracle(e1, length):
    """All (start, end) pairs of directed walks with ``length`` edges, start != end."""
    nodes = {v for edge in e1 for v in edge}
    pairs = set()
    for path in itertools.product(sorted(nodes), repeat=length + 1):
        if all((u, v) in e1 for u, v in zip(path, path[1:])) and path[0] != path[-1]:
            pairs.add((path[0], path[-1]))
    return pairs


def test_build_1hop_examples():
    graphs = build_1hop(SEQ)
    assert graphs.e1 == {(758, 184), (184, 20), (20, 88), (88, 184), (184, 302), (302, 88)}
    assert graphs.nodes == {758, 184, 20, 88, 302}
    assert graphs.last_app == 184

    single = build_1hop([PAD, PAD, 5])
    assert single.nodes == {5} and single.e1 == frozenset()
    assert build_1hop([5, 5]).e1 == frozenset()
    with pytest.raises(DataError):
        build_1hop([PAD, PAD])


def test_compose_hops_examples():
    e2, e3 = compose_hops({(1, 2), (2, 3), (3, 1)})
    assert e2 == {(1, 3), (2, 1), (3, 2)}
    assert e3 == frozenset()
    assert compose_hops({(1, 2), (2, 1)}) == (frozenset(), frozenset())
    with pytest.raises(DataError):
        compose_hops({(1, 9)}, nodes={1, 2})


def test_compose_hops_on_sequence_matches_walk_oracle():
    graphs = build_graphs(SEQ)
    assert {(758, 20), (184, 88), (20, 184), (88, 302)} <= graphs.e2
    assert graphs.e2 == walk_oracle(graphs.e1, 2)
    assert graphs.e3 <= walk_oracle(graphs.e1, 3)
    assert graphs.e3 == {(u, x) for u, w in graphs.e2 for a, x in graphs.e1 if a == w and u != x}


def test_three_hop_edges_drop_walks_through_excluded_self_loops():
    graphs = build_graphs([1, 2, 1, 3])
    assert graphs.e1 == {(1, 2), (2, 1), (1, 3)}
    assert graphs.e2 == {(2, 3)}
    assert graphs.e3 == frozenset()
    walks = walk_oracle(graphs.e1, 3)
    assert walks == {(1, 3), (1, 2), (2, 1)}
    assert (1, 3) not in graphs.e3
    assert graphs.e3 < walks


def test_compose_hops_random_windows_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        length = int(rng.integers(1, 9))
        window = [int(a) for a in rng.integers(1, 7, size=length)]
        graphs = build_graphs(window)
        e1 = graphs.e1
        expected_e2 = {(u, w) for (u, v) in e1 for (v2, w) in e1 if v == v2 and u != w}
        expected_e3 = {(u, x) for (u, w) in expected_e2 for (w2, x) in e1 if w == w2 and u != x}
        assert graphs.e2 == expected_e2
        assert graphs.e3 == expected_e3
        assert all(u != v for hop in (1, 2, 3) for u, v in graphs.edges(hop))
        assert all(u in graphs.nodes and v in graphs.nodes for hop in (1, 2, 3) for u, v in graphs.edges(hop))


def test_non_isolated_and_dump():
    graphs = build_graphs([1, 2, 3])
    assert graphs.non_isolated(1) == {1, 2, 3}
    assert graphs.non_isolated(2) == {1, 3}
    assert graphs.non_isolated(3) == set()
    assert graphs.dump().splitlines() == ["1\t1\t2", "1\t2\t3", "2\t1\t3"]


def test_normalized_adjacency():
    adjacency = normalized_adjacency({(1, 2), (2, 3)}, [1, 2, 3, 4], 5)
    assert adjacency.shape == (5, 5)
    assert np.allclose(adjacency, adjacency.T)
    assert adjacency[0, 1] == pytest.approx(1 / np.sqrt(2))
    assert np.all(adjacency[3] == 0) and np.all(adjacency[4] == 0)

    cycle = normalized_adjacency({(1, 2), (2, 3), (3, 1)}, [1, 2, 3], 3)
    assert np.allclose(cycle @ np.ones(3), np.ones(3))


def instance(window, target=1, tau=5, rho=None):
    apps = [a for a in window if a != PAD]
    return PredictionInstance(user_id="u", window=window, window_len=len(apps), target=target, tau=tau, rho_category=rho)


def test_encode_batch_layout():
    batch = encode_batch([instance([0, 0, 4, 2, 7]), instance([3, 1, 3, 1, 5], rho=2)], window=5, intent_window=3)
    assert batch.node_ids.tolist() == [[2, 4, 7, 0, 0], [1, 3, 5, 0, 0]]
    assert batch.node_mask.sum(axis=1).tolist() == [3, 3]
    assert batch.adjacency.shape == (2, 3, 5, 5)
    assert batch.last_selector[0, 0].tolist() == [0, 0, 1, 0, 0]
    assert batch.intent_selector[0].argmax(axis=1).tolist() == [1, 0, 2]
    assert batch.categories.tolist() == [0, 2]
    assert batch.hours.tolist() == [5, 5]

    short = encode_batch([instance([0, 0, 0, 0, 6])], window=5, intent_window=3)
    assert short.intent_selector[0, :2].sum() == 0
    assert short.intent_selector[0, 2, 0] == 1.0

    one_hop = encode_batch([instance([0, 0, 4, 2, 7])], window=5, intent_window=3, hops=1)
    assert one_hop.adjacency.shape == (1, 1, 5, 5)


def test_graph_batch_subset():
    batch = encode_batch([instance([0, 1, 2]), instance([0, 3, 4]), instance([2, 3, 4])], window=3, intent_window=2)
    part = batch.subset(np.array([2, 0]))
    assert len(part) == 2
    assert part.node_ids.tolist() == [batch.node_ids[2].tolist(), batch.node_ids[0].tolist()]
    assert part.graphs[1] is batch.graphs[0]
