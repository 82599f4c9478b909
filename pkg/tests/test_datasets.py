from itertools import combinations

import numpy as np
import pytest

from conftest import random_graph
from hamgnn.datasets import (
    DataFormatError,
    DatasetBundle,
    generate_grid,
    generate_tree,
    gromov_delta,
    load_dataset,
    mix_datasets,
    normalize_rows,
    save_dataset,
)
from hamgnn.graph import UNREACHABLE, bfs_distances, build_graph
from hamgnn.training import SplitMasks


def write_toy_dataset(directory, edges="0 1\n", features="1.0,2.0\n3.0,4.0\n", labels="0\n1\n"):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "edges.txt").write_text(edges)
    (directory / "features.csv").write_text(features)
    (directory / "labels.csv").write_text(labels)


def brute_force_delta(graph):
    """Oracle: enumerate every quadruple with plain Python loops."""
    n = graph.num_nodes
    dist = np.stack([bfs_distances(graph, s) for s in range(n)])
    best = 0.0
    hist = {}
    examined = 0
    for w, x, y, z in combinations(range(n), 4):
        ds = (dist[w, x], dist[y, z], dist[w, y], dist[x, z], dist[w, z], dist[x, y])
        if any(d == UNREACHABLE for d in ds):
            continue
        s1 = dist[w, x] + dist[y, z]
        s2 = dist[w, y] + dist[x, z]
        s3 = dist[w, z] + dist[x, y]
        ordered = sorted((s1, s2, s3), reverse=True)
        delta = (ordered[0] - ordered[1]) / 2.0
        hist[delta] = hist.get(delta, 0) + 1
        best = max(best, delta)
        examined += 1
    return best, hist, examined


class TestLoader:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        g = random_graph(rng, 8, 0.4)
        bundle = DatasetBundle(
            g,
            rng.normal(size=(8, 3)),
            rng.integers(0, 2, size=8),
            SplitMasks(np.array([0, 1, 2]), np.array([3, 4]), np.array([5, 6, 7])),
            "toy",
        )
        save_dataset(bundle, tmp_path / "a")
        loaded = load_dataset(tmp_path / "a", normalize_features=False)
        save_dataset(loaded, tmp_path / "b")
        again = load_dataset(tmp_path / "b", normalize_features=False)
        assert np.array_equal(loaded.features, bundle.features)
        assert np.array_equal(again.features, loaded.features)
        assert np.array_equal(again.labels, loaded.labels)
        assert np.array_equal(again.graph.edges, loaded.graph.edges)
        assert np.array_equal(again.splits.train, loaded.splits.train)

    def test_two_node_toy(self, tmp_path):
        write_toy_dataset(tmp_path / "toy")
        bundle = load_dataset(tmp_path / "toy")
        assert bundle.graph.num_nodes == 2
        assert np.allclose(bundle.graph.norm_adjacency.toarray(), [[0.5, 0.5], [0.5, 0.5]])

    def test_malformed_edge_line_number(self, tmp_path):
        write_toy_dataset(tmp_path / "bad", edges="0 x\n")
        with pytest.raises(DataFormatError, match="edges.txt:1"):
            load_dataset(tmp_path / "bad")

    def test_wrong_token_count(self, tmp_path):
        write_toy_dataset(tmp_path / "bad2", edges="0 1\n0 1 2\n")
        with pytest.raises(DataFormatError, match="edges.txt:2"):
            load_dataset(tmp_path / "bad2")

    def test_count_mismatch(self, tmp_path):
        write_toy_dataset(tmp_path / "bad3", labels="0\n1\n0\n")
        with pytest.raises(DataFormatError, match="labels"):
            load_dataset(tmp_path / "bad3")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope")

    def test_non_contiguous_labels_rejected(self, tmp_path):
        write_toy_dataset(tmp_path / "bad4", labels="0\n2\n")
        with pytest.raises(DataFormatError, match="contiguous"):
            load_dataset(tmp_path / "bad4")

    def test_row_normalization_default_on(self, tmp_path):
        write_toy_dataset(tmp_path / "norm", features="2.0,2.0\n-1.0,3.0\n")
        bundle = load_dataset(tmp_path / "norm")
        assert np.allclose(np.abs(bundle.features).sum(axis=1), 1.0)
        raw = load_dataset(tmp_path / "norm", normalize_features=False)
        assert np.allclose(raw.features, [[2.0, 2.0], [-1.0, 3.0]])

    def test_normalize_rows_zero_row(self):
        out = normalize_rows(np.array([[0.0, 0.0], [1.0, 1.0]]))
        assert np.allclose(out, [[0.0, 0.0], [0.5, 0.5]])

    def test_splits_json_loaded(self, tmp_path):
        write_toy_dataset(tmp_path / "s")
        (tmp_path / "s" / "splits.json").write_text('{"train": [0], "val": [], "test": [1]}')
        bundle = load_dataset(tmp_path / "s")
        assert bundle.splits.train.tolist() == [0]
        assert bundle.splits.test.tolist() == [1]


class TestGenerators:
    def test_small_tree_counts(self):
        bundle = generate_tree(depth=1, branching=2)
        assert bundle.graph.num_nodes == 3
        assert bundle.graph.num_edges == 2

    def test_deep_tree_counts(self):
        bundle = generate_tree(depth=7, branching=2)
        assert bundle.graph.num_nodes == 255
        assert bundle.graph.num_edges == 254
        assert bundle.num_classes == 2
        # the two root subtrees are balanced; root joins class 0
        assert np.sum(bundle.labels == 0) == 128
        assert np.sum(bundle.labels == 1) == 127

    def test_tree_depth_labels(self):
        bundle = generate_tree(depth=2, branching=3, label_rule="depth")
        assert bundle.num_classes == 3
        assert bundle.labels[0] == 0

    def test_tree_is_deterministic(self):
        a = generate_tree(depth=4, branching=2, seed=5)
        b = generate_tree(depth=4, branching=2, seed=5)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.splits.train, b.splits.train)

    def test_any_tree_has_zero_delta(self, rng):
        for depth, branching in [(3, 2), (2, 4), (5, 1)]:
            bundle = generate_tree(depth=depth, branching=branching)
            report = gromov_delta(bundle.graph, mode="exact")
            assert report.max_delta == 0.0

    def test_grid(self):
        bundle = generate_grid(4, 5)
        assert bundle.graph.num_nodes == 20
        assert bundle.graph.num_edges == 4 * 4 + 3 * 5
        assert bundle.num_classes == 4


class TestMix:
    def test_counts_and_block_structure(self, rng):
        a = generate_tree(depth=3, branching=2, seed=1)
        b = generate_grid(3, 3, seed=2)
        mixed = mix_datasets(a, b, rng)
        na, nb = a.graph.num_nodes, b.graph.num_nodes
        assert mixed.graph.num_nodes == na + nb
        assert mixed.graph.num_edges == a.graph.num_edges + b.graph.num_edges
        # full scan: no cross-block adjacency entries
        dense = mixed.graph.adjacency.toarray()
        assert not dense[:na, na:].any()
        assert not dense[na:, :na].any()
        # within-block adjacency preserved bit-exactly
        assert np.array_equal(dense[:na, :na], a.graph.adjacency.toarray())
        assert np.array_equal(dense[na:, na:], b.graph.adjacency.toarray())

    def test_label_offsets_and_padding(self, rng):
        a = generate_tree(depth=2, branching=2, seed=1)
        b = generate_grid(3, 3, seed=2)
        mixed = mix_datasets(a, b, rng)
        na = a.graph.num_nodes
        assert mixed.num_classes == a.num_classes + b.num_classes
        assert np.array_equal(mixed.labels[na:], b.labels + a.num_classes)
        width = max(a.features.shape[1], b.features.shape[1])
        assert mixed.features.shape[1] == width
        assert np.array_equal(mixed.features[:na, : a.features.shape[1]], a.features)
        assert np.array_equal(mixed.features[na:, : b.features.shape[1]], b.features)
        assert not mixed.features[na:, b.features.shape[1] :].any()

    def test_disjoint_feature_variant(self, rng):
        a = generate_tree(depth=2, branching=2, seed=1)
        b = generate_grid(3, 3, seed=2)
        mixed = mix_datasets(a, b, rng, disjoint_features=True)
        assert mixed.features.shape[1] == a.features.shape[1] + b.features.shape[1]
        assert not mixed.features[: a.graph.num_nodes, a.features.shape[1] :].any()

    def test_fresh_split_covers_everything(self, rng):
        a = generate_tree(depth=3, branching=2, seed=1)
        b = generate_grid(3, 3, seed=2)
        mixed = mix_datasets(a, b, rng)
        s = mixed.splits
        union = np.sort(np.concatenate([s.train, s.val, s.test]))
        assert np.array_equal(union, np.arange(mixed.graph.num_nodes))

    def test_mix_with_empty(self, rng):
        a = generate_tree(depth=3, branching=2, seed=1)
        empty = DatasetBundle(
            build_graph(0, []),
            np.zeros((0, a.features.shape[1])),
            np.zeros(0, dtype=np.int64),
            None,
            "empty",
        )
        mixed = mix_datasets(a, empty, rng)
        assert mixed.graph.num_nodes == a.graph.num_nodes
        assert np.array_equal(mixed.features, a.features)


class TestGromovDelta:
    def test_path_graph_zero(self):
        g = build_graph(4, [(0, 1), (1, 2), (2, 3)])
        report = gromov_delta(g, mode="exact")
        assert report.max_delta == 0.0
        assert report.quadruples_examined == 1

    def test_four_cycle_delta_one(self):
        g = build_graph(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
        report = gromov_delta(g, mode="exact")
        assert report.max_delta == 1.0
        assert report.histogram == {1.0: 1}

    def test_matches_brute_force_on_random_graphs(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(4, 13))
            g = random_graph(rng, n, float(rng.uniform(0.2, 0.7)), ensure_edge=False)
            want_max, want_hist, want_examined = brute_force_delta(g)
            report = gromov_delta(g, mode="exact")
            assert report.max_delta == want_max, f"seed {seed}"
            assert report.histogram == want_hist, f"seed {seed}"
            assert report.quadruples_examined == want_examined, f"seed {seed}"

    def test_deltas_are_half_integers(self, rng):
        for _ in range(10):
            g = random_graph(rng, 10, 0.4)
            report = gromov_delta(g, mode="exact")
            for delta in report.histogram:
                assert delta * 2 == int(delta * 2)
                assert delta >= 0

    def test_components_skipped(self):
        # two triangles, disconnected: no 4-node component, zero quadruples
        g = build_graph(6, [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)])
        report = gromov_delta(g, mode="exact")
        assert report.quadruples_examined == 0
        assert report.max_delta == 0.0

    def test_sampled_mode_matches_exact_on_small_graph(self, rng):
        g = build_graph(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
        report = gromov_delta(g, mode="sampled", sample_quadruples=2000, rng=rng)
        assert report.mode == "sampled"
        assert report.max_delta == 1.0
        assert report.quadruples_examined <= 2000

    def test_sampled_skips_cross_component(self, rng):
        g = build_graph(8, [(0, 1), (1, 2), (2, 3), (4, 5), (5, 6), (6, 7)])
        report = gromov_delta(g, mode="sampled", sample_quadruples=500, rng=rng)
        assert report.max_delta == 0.0  # both components are paths

    def test_exact_node_limit(self):
        g = build_graph(301, [(i, i + 1) for i in range(300)])
        with pytest.raises(ValueError, match="exact"):
            gromov_delta(g, mode="exact")

    def test_report_json_shape(self):
        g = build_graph(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
        payload = gromov_delta(g, mode="exact").to_json_dict()
        assert payload["mode"] == "exact"
        assert payload["histogram"] == {"1.0": 1}
        assert payload["max_delta"] == 1.0
