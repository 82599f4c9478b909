"""Dataset I/O, synthetic generators, dataset mixing, and hyperbolicity.

Datasets live in plain text: ``edges.txt`` (one "u v" pair per line),
``features.csv``, ``labels.csv``, and an optional ``splits.json``.  The
Gromov delta analysis uses the four-point condition over hop distances,
exactly on small graphs and by quadruple sampling with cached per-node BFS
on large ones.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from itertools import combinations
from pathlib import Path

import numpy as np

from .graph import SparseGraph, bfs_distances, build_graph, connected_components
from .training import SplitMasks, make_fraction_split


class DataFormatError(ValueError):
    """Malformed dataset file; the message carries file and line context."""


@dataclass
class DatasetBundle:
    graph: SparseGraph
    features: np.ndarray
    labels: np.ndarray
    splits: SplitMasks | None
    name: str

    def __post_init__(self):
        if self.features.shape[0] != self.graph.num_nodes:
            raise DataFormatError(
                f"{self.name}: {self.features.shape[0]} feature rows for "
                f"{self.graph.num_nodes} nodes"
            )
        if self.labels.shape[0] != self.graph.num_nodes:
            raise DataFormatError(
                f"{self.name}: {self.labels.shape[0]} labels for {self.graph.num_nodes} nodes"
            )
        present = np.unique(self.labels)
        if present.size and not np.array_equal(present, np.arange(present.size)):
            raise DataFormatError(f"{self.name}: class ids must be contiguous from 0")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def normalize_rows(features: np.ndarray) -> np.ndarray:
    """L1-normalize each row; zero rows stay zero."""
    norms = np.abs(features).sum(axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return features / norms


def _parse_edges(path: Path, num_nodes: int) -> np.ndarray:
    edges = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            parts = stripped.split()
            if len(parts) != 2:
                raise DataFormatError(f"{path}:{lineno}: expected 'u v', got {stripped!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise DataFormatError(
                    f"{path}:{lineno}: non-integer endpoint in {stripped!r}"
                ) from None
            if not (0 <= u < num_nodes and 0 <= v < num_nodes):
                raise DataFormatError(
                    f"{path}:{lineno}: edge ({u}, {v}) out of range for {num_nodes} nodes"
                )
            edges.append((u, v))
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2)


def load_dataset(directory, normalize_features: bool = True) -> DatasetBundle:
    """Load a dataset directory; see the module docstring for the layout."""
    directory = Path(directory)
    for fname in ("edges.txt", "features.csv", "labels.csv"):
        if not (directory / fname).is_file():
            raise FileNotFoundError(f"missing {fname} in {directory}")

    try:
        features = np.loadtxt(directory / "features.csv", delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DataFormatError(f"{directory / 'features.csv'}: {exc}") from None
    try:
        labels = np.loadtxt(directory / "labels.csv", dtype=np.int64, ndmin=1)
    except ValueError as exc:
        raise DataFormatError(f"{directory / 'labels.csv'}: {exc}") from None

    num_nodes = features.shape[0]
    if labels.shape[0] != num_nodes:
        raise DataFormatError(
            f"{directory}: {labels.shape[0]} labels but {num_nodes} feature rows"
        )
    edges = _parse_edges(directory / "edges.txt", num_nodes)
    graph = build_graph(num_nodes, edges)

    splits = None
    splits_path = directory / "splits.json"
    if splits_path.is_file():
        with open(splits_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        try:
            splits = SplitMasks(
                train=np.asarray(raw["train"], dtype=np.int64),
                val=np.asarray(raw["val"], dtype=np.int64),
                test=np.asarray(raw["test"], dtype=np.int64),
            )
        except KeyError as exc:
            raise DataFormatError(f"{splits_path}: missing key {exc}") from None

    if normalize_features:
        features = normalize_rows(features)
    return DatasetBundle(graph, features, labels, splits, directory.name)


def save_dataset(bundle: DatasetBundle, directory) -> None:
    """Write a bundle back out in the plain-text layout, loadably bit-exact."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "edges.txt", "w", encoding="utf-8") as fh:
        for u, v in bundle.graph.edges:
            fh.write(f"{u} {v}\n")
    with open(directory / "features.csv", "w", encoding="utf-8") as fh:
        for row in bundle.features:
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
    with open(directory / "labels.csv", "w", encoding="utf-8") as fh:
        for y in bundle.labels:
            fh.write(f"{y}\n")
    if bundle.splits is not None:
        payload = {
            "train": bundle.splits.train.tolist(),
            "val": bundle.splits.val.tolist(),
            "test": bundle.splits.test.tolist(),
        }
        with open(directory / "splits.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------


def generate_tree(
    depth: int,
    branching: int,
    label_rule: str = "subtree",
    noise_std: float = 0.1,
    seed: int = 0,
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> DatasetBundle:
    """Balanced tree: one-hot depth plus Gaussian noise as features.

    ``label_rule`` "subtree" labels each node by the top-level subtree it
    belongs to (root joins class 0); "depth" labels by node depth.
    """
    if depth < 1 or branching < 1:
        raise ValueError("depth and branching must be at least 1")
    rng = np.random.default_rng(seed)
    parents = [-1]
    depths = [0]
    edges = []
    frontier = [0]
    for d in range(depth):
        next_frontier = []
        for node in frontier:
            for _ in range(branching):
                child = len(parents)
                parents.append(node)
                depths.append(d + 1)
                edges.append((node, child))
                next_frontier.append(child)
        frontier = next_frontier
    n = len(parents)
    depths_arr = np.array(depths, dtype=np.int64)

    features = np.zeros((n, depth + 1))
    features[np.arange(n), depths_arr] = 1.0
    features = features + rng.normal(0.0, noise_std, size=features.shape)

    if label_rule == "subtree":
        labels = np.zeros(n, dtype=np.int64)
        for node in range(1, n):
            anc = node
            while parents[anc] != 0:
                anc = parents[anc]
            labels[node] = anc - 1  # children of the root are nodes 1..branching
    elif label_rule == "depth":
        labels = depths_arr.copy()
    else:
        raise ValueError(f"unknown label_rule {label_rule!r}")

    graph = build_graph(n, edges)
    splits = make_fraction_split(labels, rng, split_fractions)
    return DatasetBundle(graph, features, labels, splits, f"tree-d{depth}-b{branching}")


def generate_grid(
    rows: int,
    cols: int,
    seed: int = 0,
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> DatasetBundle:
    """4-neighbor lattice with coordinate features, labeled by quadrant."""
    if rows < 2 or cols < 2:
        raise ValueError("grid needs at least 2 rows and 2 columns")
    rng = np.random.default_rng(seed)
    n = rows * cols
    edges = []
    for i in range(rows):
        for j in range(cols):
            node = i * cols + j
            if j + 1 < cols:
                edges.append((node, node + 1))
            if i + 1 < rows:
                edges.append((node, node + cols))
    ii, jj = np.divmod(np.arange(n), cols)
    features = np.stack([ii / (rows - 1), jj / (cols - 1)], axis=1).astype(np.float64)
    labels = ((ii >= rows / 2).astype(np.int64) * 2 + (jj >= cols / 2).astype(np.int64))
    graph = build_graph(n, edges)
    splits = make_fraction_split(labels, rng, split_fractions)
    return DatasetBundle(graph, features, labels, splits, f"grid-{rows}x{cols}")


def mix_datasets(
    a: DatasetBundle,
    b: DatasetBundle,
    rng: np.random.Generator,
    disjoint_features: bool = False,
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> DatasetBundle:
    """Block-diagonal union of two bundles with a fresh stratified split.

    No cross edges are introduced.  Features are zero-padded on the right
    to a common width with both datasets occupying the leading columns;
    ``disjoint_features`` instead gives each dataset its own column block.
    b's class ids are offset by a's class count.
    """
    na, nb = a.graph.num_nodes, b.graph.num_nodes
    edges = list(map(tuple, a.graph.edges)) + [(u + na, v + na) for u, v in b.graph.edges]
    graph = build_graph(na + nb, edges)

    wa, wb = a.features.shape[1], b.features.shape[1]
    if disjoint_features:
        features = np.zeros((na + nb, wa + wb))
        features[:na, :wa] = a.features
        features[na:, wa:] = b.features
    else:
        width = max(wa, wb)
        features = np.zeros((na + nb, width))
        features[:na, :wa] = a.features
        features[na:, :wb] = b.features

    labels = np.concatenate([a.labels, b.labels + a.num_classes]).astype(np.int64)
    splits = make_fraction_split(labels, rng, split_fractions)
    return DatasetBundle(graph, features, labels, splits, f"{a.name}+{b.name}")


# ---------------------------------------------------------------------------
# Gromov delta-hyperbolicity (four-point condition)
# ---------------------------------------------------------------------------

EXACT_NODE_LIMIT = 300


@dataclass
class HyperbolicityReport:
    mode: str
    max_delta: float
    histogram: dict[float, int]
    quadruples_examined: int

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "max_delta": self.max_delta,
            "histogram": {f"{k:.1f}": v for k, v in sorted(self.histogram.items())},
            "quadruples_examined": self.quadruples_examined,
        }


def _quadruple_delta2(d_wx, d_yz, d_wy, d_xz, d_wz, d_xy):
    """2*delta of one quadruple from its six pairwise distances."""
    s1 = d_wx + d_yz
    s2 = d_wy + d_xz
    s3 = d_wz + d_xy
    top = max(s1, s2, s3)
    low = min(s1, s2, s3)
    second = s1 + s2 + s3 - top - low
    return top - second


def _exact_component(dist: np.ndarray, counts: dict[int, int]) -> int:
    """Accumulate 2*delta counts over every quadruple of one component.

    Enumerates quadruples i<j<k<l once by pairing the outer pair (i, j)
    with every pair (k, l) whose smaller endpoint exceeds j.
    """
    m = dist.shape[0]
    if m < 4:
        return 0
    pairs = np.array(list(combinations(range(m), 2)), dtype=np.int64)
    pair_d = dist[pairs[:, 0], pairs[:, 1]]
    firsts = pairs[:, 0]
    max2 = 0
    examined = 0
    for e in range(pairs.shape[0]):
        i, j = pairs[e]
        start = np.searchsorted(firsts, j + 1, side="left")
        if start >= pairs.shape[0]:
            continue
        k = pairs[start:, 0]
        ell = pairs[start:, 1]
        s1 = pair_d[e] + pair_d[start:]
        s2 = dist[i, k] + dist[j, ell]
        s3 = dist[i, ell] + dist[j, k]
        top = np.maximum(s1, np.maximum(s2, s3))
        low = np.minimum(s1, np.minimum(s2, s3))
        delta2 = (top - (s1 + s2 + s3 - top - low)).astype(np.int64)
        examined += delta2.size
        if delta2.size:
            local = np.bincount(delta2)
            for val, cnt in enumerate(local):
                if cnt:
                    counts[val] = counts.get(val, 0) + int(cnt)
            max2 = max(max2, int(delta2.max()))
    return examined


def gromov_delta(
    graph: SparseGraph,
    mode: str = "exact",
    sample_quadruples: int = 1_000_000,
    rng: np.random.Generator | None = None,
) -> HyperbolicityReport:
    """Four-point-condition delta over node quadruples.

    Exact mode enumerates every quadruple inside each connected component
    (allowed up to EXACT_NODE_LIMIT nodes); sampled mode draws quadruples
    uniformly, skipping any that span components, and reports a lower
    bound.  All deltas of a hop metric are multiples of 0.5.
    """
    if mode not in ("exact", "sampled"):
        raise ValueError(f"mode must be 'exact' or 'sampled', got {mode!r}")
    counts: dict[int, int] = {}
    examined = 0

    if mode == "exact":
        if graph.num_nodes > EXACT_NODE_LIMIT:
            raise ValueError(
                f"exact mode allows up to {EXACT_NODE_LIMIT} nodes, got {graph.num_nodes}"
            )
        comp = connected_components(graph)
        for cid in np.unique(comp):
            members = np.where(comp == cid)[0]
            if members.size < 4:
                continue
            index = {int(node): i for i, node in enumerate(members)}
            dist = np.zeros((members.size, members.size), dtype=np.int64)
            for i, node in enumerate(members):
                d = bfs_distances(graph, int(node))
                dist[i] = d[members]
            examined += _exact_component(dist, counts)
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        comp = connected_components(graph)
        cache: dict[int, np.ndarray] = {}

        def dist_row(node: int) -> np.ndarray:
            row = cache.get(node)
            if row is None:
                row = bfs_distances(graph, node)
                cache[node] = row
            return row

        n = graph.num_nodes
        drawn = 0
        while drawn < sample_quadruples:
            quad = rng.integers(0, n, size=4)
            drawn += 1
            w, x, y, z = (int(q) for q in quad)
            if len({w, x, y, z}) < 4:
                continue
            if not (comp[w] == comp[x] == comp[y] == comp[z]):
                continue
            dw = dist_row(w)
            dx = dist_row(x)
            dy = dist_row(y)
            delta2 = _quadruple_delta2(dw[x], dy[z], dw[y], dx[z], dw[z], dx[y])
            counts[int(delta2)] = counts.get(int(delta2), 0) + 1
            examined += 1

    histogram = {k / 2.0: v for k, v in sorted(counts.items())}
    max_delta = max(histogram) if histogram else 0.0
    return HyperbolicityReport(
        mode=mode,
        max_delta=float(max_delta),
        histogram=histogram,
        quadruples_examined=examined,
    )
