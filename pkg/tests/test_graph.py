import numpy as np
import pytest

from conftest import random_graph
from hamgnn.graph import (
    UNREACHABLE,
    GraphError,
    bfs_distances,
    build_graph,
    connected_components,
    spmm,
)


def dense_norm_adjacency(n, edges):
    """Oracle: D^{-1/2}(A + I)D^{-1/2} built densely."""
    a = np.zeros((n, n))
    for u, v in edges:
        if u != v:
            a[u, v] = a[v, u] = 1.0
    d = np.diag(1.0 / np.sqrt(a.sum(axis=1) + 1.0))
    return d @ (a + np.eye(n)) @ d


class TestBuildGraph:
    def test_two_node_normalization(self):
        g = build_graph(2, [(0, 1)])
        assert np.allclose(g.norm_adjacency.toarray(), [[0.5, 0.5], [0.5, 0.5]])

    def test_isolated_node(self):
        g = build_graph(1, [])
        assert np.allclose(g.norm_adjacency.toarray(), [[1.0]])

    def test_duplicate_and_flipped_edges_collapse(self):
        g = build_graph(3, [(0, 1), (1, 0), (1, 2)])
        assert g.num_edges == 2
        entry = g.norm_adjacency[0, 1]
        assert entry == pytest.approx(1.0 / np.sqrt(2 * 3), abs=1e-12)
        want = dense_norm_adjacency(3, [(0, 1), (1, 2)])
        assert np.allclose(g.norm_adjacency.toarray(), want, atol=1e-15)

    def test_self_loops_dropped_from_edges(self):
        g = build_graph(3, [(0, 0), (0, 1), (2, 2)])
        assert g.num_edges == 1
        assert [tuple(e) for e in g.edges] == [(0, 1)]

    def test_out_of_range_edge_names_pair(self):
        with pytest.raises(GraphError, match=r"\(1, 5\)"):
            build_graph(3, [(0, 1), (1, 5)])

    def test_idempotent_under_duplication_and_flips(self, rng):
        edges = [(0, 1), (1, 2), (2, 3), (0, 3)]
        noisy = edges + [(v, u) for u, v in edges] + edges
        a = build_graph(4, edges)
        b = build_graph(4, noisy)
        assert np.array_equal(a.edges, b.edges)
        assert (a.norm_adjacency != b.norm_adjacency).nnz == 0

    def test_dense_oracle_on_random_graphs(self, rng):
        for _ in range(10):
            n = int(rng.integers(2, 12))
            g = random_graph(rng, n, 0.4)
            want = dense_norm_adjacency(n, [tuple(e) for e in g.edges])
            assert np.allclose(g.norm_adjacency.toarray(), want, atol=1e-14)

    def test_spectral_radius_at_most_one(self, rng):
        for _ in range(5):
            n = int(rng.integers(2, 50))
            g = random_graph(rng, n, 0.2)
            dense = g.norm_adjacency.toarray()
            assert np.allclose(dense, dense.T)
            eigs = np.linalg.eigvalsh(dense)
            assert np.max(np.abs(eigs)) <= 1.0 + 1e-10


class TestSpmm:
    def test_averaging(self):
        g = build_graph(2, [(0, 1)])
        out = spmm(g, np.array([[2.0], [4.0]]))
        assert np.allclose(out, [[3.0], [3.0]])

    def test_identity_single_node(self):
        g = build_graph(1, [])
        out = spmm(g, np.array([[7.0, -1.0]]))
        assert np.allclose(out, [[7.0, -1.0]])

    def test_matches_dense_oracle(self, rng):
        g = random_graph(rng, 5, 0.5)
        x = rng.normal(size=(5, 3))
        want = g.norm_adjacency.toarray() @ x
        got = spmm(g, x)
        assert np.max(np.abs(got - want) / (np.abs(want) + 1e-12)) <= 1e-12

    def test_dimension_mismatch(self):
        g = build_graph(2, [(0, 1)])
        with pytest.raises(GraphError):
            spmm(g, np.zeros((3, 2)))

    def test_permutation_equivariance(self, rng):
        n = 7
        g = random_graph(rng, n, 0.4)
        x = rng.normal(size=(n, 3))
        perm = rng.permutation(n)
        g_perm = build_graph(n, [(perm[u], perm[v]) for u, v in g.edges])
        base = spmm(g, x)
        permuted = spmm(g_perm, x[np.argsort(perm)])
        assert np.allclose(permuted[perm][np.argsort(perm)], permuted)
        assert np.allclose(permuted, base[np.argsort(perm)], atol=1e-12)

    def test_deterministic_replay(self, rng):
        g = random_graph(rng, 20, 0.3)
        x = rng.normal(size=(20, 4))
        assert np.array_equal(spmm(g, x), spmm(g, x))


class TestBfs:
    def test_path(self):
        g = build_graph(3, [(0, 1), (1, 2)])
        assert bfs_distances(g, 0).tolist() == [0, 1, 2]

    def test_disconnected_sentinel(self):
        g = build_graph(2, [])
        assert bfs_distances(g, 0).tolist() == [0, UNREACHABLE]

    def test_cycle_matches_oracle(self):
        g = build_graph(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
        assert bfs_distances(g, 0).tolist() == [0, 1, 2, 1]

    def test_random_graphs_match_floyd_warshall(self, rng):
        for _ in range(5):
            n = int(rng.integers(4, 10))
            g = random_graph(rng, n, 0.35)
            inf = np.inf
            dist = np.full((n, n), inf)
            np.fill_diagonal(dist, 0.0)
            for u, v in g.edges:
                dist[u, v] = dist[v, u] = 1.0
            for k in range(n):
                dist = np.minimum(dist, dist[:, [k]] + dist[[k], :])
            for s in range(n):
                got = bfs_distances(g, s).astype(np.float64)
                got[got == UNREACHABLE] = inf
                assert np.array_equal(got, dist[s])

    def test_components(self):
        g = build_graph(5, [(0, 1), (2, 3)])
        comp = connected_components(g)
        assert comp[0] == comp[1]
        assert comp[2] == comp[3]
        assert len({comp[0], comp[2], comp[4]}) == 3
