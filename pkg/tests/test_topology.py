import numpy as np
import pytest

from manetpower.topology import (
    GenerationError,
    NodeRole,
    Topology,
    complete_graph,
    generate_erdos_renyi,
    path_graph,
)


def test_complete_graph_when_p_is_one(rng):
    t = generate_erdos_renyi(4, 1.0, rng)
    assert t.n_edges == 6


def test_p_zero_fails(rng):
    with pytest.raises(GenerationError):
        generate_erdos_renyi(2, 0.0, rng, max_retries=50)


def test_invalid_arguments(rng):
    with pytest.raises(ValueError):
        generate_erdos_renyi(1, 0.5, rng)
    with pytest.raises(ValueError):
        generate_erdos_renyi(5, 1.5, rng)


def test_mean_edge_count_matches_expectation():
    # E[|E|] = p * n(n-1)/2 = 22.5 for the unconditioned draw; conditioning on
    # source-destination connectivity barely moves it at p = 0.5
    counts = [generate_erdos_renyi(10, 0.5, np.random.default_rng(s)).n_edges for s in range(10_000)]
    assert np.mean(counts) == pytest.approx(22.5, abs=0.5)


def test_neighbors():
    assert complete_graph(4).neighbors(0) == {1, 2, 3}
    assert path_graph(3).neighbors(1) == {0, 2}
    with pytest.raises(ValueError):
        path_graph(3).neighbors(3)


def test_neighbor_relation_symmetric_and_irreflexive(rng):
    for _ in range(50):
        t = generate_erdos_renyi(int(rng.integers(2, 12)), 0.4, rng)
        for i in range(t.n):
            assert i not in t.neighbors(i)
            for j in range(t.n):
                assert (j in t.neighbors(i)) == (i in t.neighbors(j))


def test_roles():
    t = Topology(4, ((0, 1), (1, 2), (2, 3)), source=2, destination=0)
    np.testing.assert_array_equal(t.role_one_hot(2), [1, 0, 0])
    np.testing.assert_array_equal(t.role_one_hot(0), [0, 1, 0])
    np.testing.assert_array_equal(t.role_one_hot(1), [0, 0, 1])
    assert t.role(3) is NodeRole.RELAY


def test_always_source_destination_connected(rng):
    for _ in range(200):
        t = generate_erdos_renyi(int(rng.integers(2, 10)), 0.2, rng)
        assert t.source != t.destination
        assert t.is_connected()


def test_isolated_relays_allowed():
    t = Topology(4, ((0, 1),), 0, 1)
    assert t.degree(3) == 0 and t.is_connected()


def test_same_seed_same_topology():
    a = generate_erdos_renyi(10, 0.5, np.random.default_rng(7))
    b = generate_erdos_renyi(10, 0.5, np.random.default_rng(7))
    assert a == b


@pytest.mark.parametrize("edges, src, dst", [
    (((0, 0),), 0, 1),
    (((0, 5),), 0, 1),
    (((0, 1),), 1, 1),
])
def test_invalid_topologies(edges, src, dst):
    with pytest.raises(ValueError):
        Topology(3, edges, src, dst)


def test_edges_canonicalized():
    t = Topology(3, ((2, 0), (1, 0), (0, 2)), 0, 2)
    assert t.edges == ((0, 1), (0, 2))


def test_directed_edge_layout():
    t = Topology(3, ((0, 1), (1, 2)), 0, 2)
    snd, rcv, und = t.directed_edges
    assert list(zip(snd, rcv)) == [(0, 1), (1, 0), (1, 2), (2, 1)]
    assert und.tolist() == [0, 0, 1, 1]


def test_relabel_preserves_structure(rng):
    t = generate_erdos_renyi(7, 0.5, rng)
    perm = rng.permutation(7)
    r = t.relabel(perm)
    assert r.n_edges == t.n_edges
    assert r.source == perm[t.source]
    for i, j in t.edges:
        assert perm[j] in r.neighbors(perm[i])
