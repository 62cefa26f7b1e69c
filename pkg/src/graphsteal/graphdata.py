"""Categorical graphs, synthetic valence-constrained datasets, and splits."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .canon import canonical_key_arrays

DEFAULT_N_MAX = 12
DEFAULT_NODE_CATS = 4
DEFAULT_EDGE_CATS = 3


class GraphError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CategoricalGraph:
    """Typed graph stored as category indices.

    ``nodes[i]`` is the category of node i (0..a-1); ``edges[i, j]`` is the
    edge category (0..b-1, 0 meaning no edge), symmetric with a zero
    diagonal. One-hot views are exposed as ``x`` and ``e``.
    """

    nodes: np.ndarray
    edges: np.ndarray
    a: int
    b: int

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=np.int64)
        edges = np.array(self.edges, dtype=np.int64)
        n = len(nodes)
        if n < 2:
            raise GraphError(f"graph needs at least 2 nodes, got {n}")
        if edges.shape != (n, n):
            raise GraphError(f"edge matrix shape {edges.shape} does not match n={n}")
        if nodes.min() < 0 or nodes.max() >= self.a:
            raise GraphError("node category out of range")
        if edges.min() < 0 or edges.max() >= self.b:
            raise GraphError("edge category out of range")
        if not np.array_equal(edges, edges.T):
            raise GraphError("edge matrix must be symmetric")
        if np.any(np.diag(edges) != 0):
            raise GraphError("self loops are not allowed")
        nodes.setflags(write=False)
        edges.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def x(self) -> np.ndarray:
        return np.eye(self.a)[self.nodes]

    @property
    def e(self) -> np.ndarray:
        return np.eye(self.b)[self.edges]

    @property
    def adjacency(self) -> np.ndarray:
        return (self.edges != 0).astype(float)

    def edge_list(self) -> list[tuple[int, int, int]]:
        iu, ju = np.nonzero(np.triu(self.edges, 1))
        return [(int(i), int(j), int(self.edges[i, j])) for i, j in zip(iu, ju)]

    def permute(self, perm) -> "CategoricalGraph":
        perm = np.asarray(perm)
        return CategoricalGraph(self.nodes[perm], self.edges[np.ix_(perm, perm)], self.a, self.b)

    def relax(self) -> "RelaxedGraph":
        return RelaxedGraph(self.x, self.e)

    def key(self) -> bytes:
        return canonical_key(self)

    def __eq__(self, other):
        if not isinstance(other, CategoricalGraph):
            return NotImplemented
        return (self.a, self.b) == (other.a, other.b) and np.array_equal(
            self.nodes, other.nodes) and np.array_equal(self.edges, other.edges)

    def __hash__(self):
        return hash((self.a, self.b, self.nodes.tobytes(), self.edges.tobytes()))

    @classmethod
    def from_edge_list(cls, nodes, edge_list, a, b):
        n = len(nodes)
        edges = np.zeros((n, n), dtype=np.int64)
        for i, j, c in edge_list:
            edges[i, j] = edges[j, i] = c
        return cls(np.asarray(nodes), edges, a, b)


@dataclass
class RelaxedGraph:
    """Probability-simplex relaxation: x is (n, a), e is (n, n, b)."""

    x: np.ndarray
    e: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.e = np.asarray(self.e, dtype=float)
        n = self.x.shape[0]
        if self.e.shape[:2] != (n, n):
            raise GraphError("relaxed edge tensor does not match node count")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def adjacency(self) -> np.ndarray:
        adj = 1.0 - self.e[:, :, 0]
        np.fill_diagonal(adj, 0.0)
        return adj

    def check(self, tol=1e-9):
        if np.any(self.x < -tol) or np.any(self.e < -tol):
            raise GraphError("negative probability")
        if not np.allclose(self.x.sum(1), 1.0, atol=tol):
            raise GraphError("node rows must sum to 1")
        off = ~np.eye(self.n, dtype=bool)
        if not np.allclose(self.e.sum(2)[off], 1.0, atol=tol):
            raise GraphError("edge fibers must sum to 1")
        if not np.allclose(self.e, self.e.transpose(1, 0, 2), atol=tol):
            raise GraphError("relaxed edges must be symmetric")

    def discretize(self) -> CategoricalGraph:
        # np.argmax returns the first maximum, i.e. ties go to the lower category
        nodes = np.argmax(self.x, axis=1)
        edges = np.argmax(self.e, axis=2)
        edges = np.triu(edges, 1)
        edges = edges + edges.T
        return CategoricalGraph(nodes, edges, self.x.shape[1], self.e.shape[2])


@dataclass
class LabeledDataset:
    graphs: list[CategoricalGraph]
    labels: list[int]
    num_classes: int
    a: int
    b: int
    n_max: int
    seed: int | None = None

    def __post_init__(self):
        if len(self.graphs) != len(self.labels):
            raise GraphError("graphs and labels differ in length")
        for g in self.graphs:
            if (g.a, g.b) != (self.a, self.b):
                raise GraphError("all graphs must share (a, b)")
            if g.n > self.n_max:
                raise GraphError(f"graph with {g.n} nodes exceeds n_max={self.n_max}")
        self.labels = [int(y) for y in self.labels]
        for y in self.labels:
            if not 0 <= y < self.num_classes:
                raise GraphError(f"label {y} out of range")

    def __len__(self):
        return len(self.graphs)

    def __iter__(self):
        return iter(zip(self.graphs, self.labels))

    def subset(self, idx) -> "LabeledDataset":
        idx = list(idx)
        return LabeledDataset([self.graphs[i] for i in idx], [self.labels[i] for i in idx],
                              self.num_classes, self.a, self.b, self.n_max, self.seed)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def check_all_classes(self):
        counts = self.class_counts()
        if np.any(counts == 0):
            raise GraphError(f"classes {np.flatnonzero(counts == 0).tolist()} are empty")


@dataclass(frozen=True)
class ValidityRules:
    """Valence caps per node category plus optional connectivity.

    Edge category c counts c times toward a node's degree.
    """

    max_degree: tuple[int, ...]
    require_connected: bool = True

    def __post_init__(self):
        if any(c < 1 for c in self.max_degree):
            raise GraphError("valence caps must be >= 1")


@dataclass
class GenConfig:
    num_graphs: int = 300
    n_min: int = 4
    n_max: int = DEFAULT_N_MAX
    a: int = DEFAULT_NODE_CATS
    b: int = DEFAULT_EDGE_CATS
    num_classes: int = 2
    max_degree: tuple[int, ...] = (4, 3, 2, 1)
    node_probs: tuple[float, ...] | None = None
    extra_edge_prob: float = 0.15
    upgrade_prob: float = 0.2
    node_weights: tuple[int, ...] = (1, 2, 3, 4)
    edge_weights: tuple[int, ...] = (0, 1, 2)
    require_connected: bool = True
    unique: bool = True
    max_retries: int = 50

    @property
    def rules(self) -> ValidityRules:
        return ValidityRules(tuple(self.max_degree), self.require_connected)

    def validate(self):
        problems = []
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if self.num_graphs < 10 * self.num_classes:
            problems.append("num_graphs must be >= 10 * num_classes")
        if not 2 <= self.n_min <= self.n_max:
            problems.append("need 2 <= n_min <= n_max")
        if len(self.max_degree) != self.a:
            problems.append("max_degree needs one cap per node category")
        if len(self.node_weights) != self.a:
            problems.append("node_weights needs one weight per node category")
        if len(self.edge_weights) != self.b:
            problems.append("edge_weights needs one weight per edge category")
        if self.node_probs is not None and len(self.node_probs) != self.a:
            problems.append("node_probs needs one probability per node category")
        if self.b < 2:
            problems.append("need at least one edge category besides 'no edge'")
        if self.n_max > 255 or self.a > 255 or self.b > 255:
            problems.append("categories and sizes must fit in a byte")
        if problems:
            raise GenerationError(f"invalid generator config {self!r}: " + "; ".join(problems))


def canonical_key(graph: CategoricalGraph) -> bytes:
    return canonical_key_arrays(graph.nodes, graph.edges, graph.b)


def weighted_degree(graph: CategoricalGraph) -> np.ndarray:
    return graph.edges.sum(axis=1)


def is_connected(graph: CategoricalGraph) -> bool:
    adj = graph.edges != 0
    seen = np.zeros(graph.n, dtype=bool)
    seen[0] = True
    frontier = [0]
    while frontier:
        v = frontier.pop()
        for w in np.flatnonzero(adj[v] & ~seen):
            seen[w] = True
            frontier.append(int(w))
    return bool(seen.all())


def is_valid(graph: CategoricalGraph, rules: ValidityRules) -> bool:
    caps = np.asarray(rules.max_degree)[graph.nodes]
    if np.any(weighted_degree(graph) > caps):
        return False
    return not rules.require_connected or is_connected(graph)


def graph_score(graph: CategoricalGraph, node_weights, edge_weights) -> int:
    w = np.asarray(node_weights)
    u = np.asarray(edge_weights)
    iu, ju = np.triu_indices(graph.n, 1)
    return int(w[graph.nodes].sum() + u[graph.edges[iu, ju]].sum())


def _sample_graph(cfg: GenConfig, rng: np.random.Generator) -> CategoricalGraph | None:
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    probs = None if cfg.node_probs is None else np.asarray(cfg.node_probs) / np.sum(cfg.node_probs)
    nodes = rng.choice(cfg.a, size=n, p=probs)
    caps = np.asarray(cfg.max_degree)[nodes]
    edges = np.zeros((n, n), dtype=np.int64)
    deg = np.zeros(n, dtype=np.int64)
    order = rng.permutation(n)
    for k in range(1, n):
        v = order[k]
        if caps[v] < 1:
            return None
        attach = [u for u in order[:k] if deg[u] < caps[u]]
        if not attach:
            return None
        u = attach[int(rng.integers(len(attach)))]
        edges[u, v] = edges[v, u] = 1
        deg[u] += 1
        deg[v] += 1
    for i in range(n):
        for j in range(i + 1, n):
            if edges[i, j] == 0 and rng.random() < cfg.extra_edge_prob:
                if deg[i] < caps[i] and deg[j] < caps[j]:
                    edges[i, j] = edges[j, i] = 1
                    deg[i] += 1
                    deg[j] += 1
    if cfg.b > 2:
        for i, j in zip(*np.nonzero(np.triu(edges, 1))):
            if rng.random() < cfg.upgrade_prob:
                c = edges[i, j]
                if c + 1 < cfg.b and deg[i] < caps[i] and deg[j] < caps[j]:
                    edges[i, j] = edges[j, i] = c + 1
                    deg[i] += 1
                    deg[j] += 1
    g = CategoricalGraph(nodes, edges, cfg.a, cfg.b)
    if cfg.require_connected and not is_connected(g):
        return None
    return g


def equal_frequency_labels(scores: Sequence[float], num_classes: int) -> np.ndarray:
    """Bin scores into equal-size classes; ties broken by index."""
    scores = np.asarray(scores)
    order = np.argsort(scores, kind="stable")
    labels = np.empty(len(scores), dtype=np.int64)
    for c, chunk in enumerate(np.array_split(order, num_classes)):
        labels[chunk] = c
    return labels


def gen_synthetic_dataset(cfg: GenConfig, seed: int) -> LabeledDataset:
    cfg.validate()
    rules = cfg.rules
    graphs = []
    seen = set()
    attempts = 0
    budget = cfg.max_retries * cfg.num_graphs
    while len(graphs) < cfg.num_graphs:
        if attempts >= budget:
            raise GenerationError(
                f"generated only {len(graphs)}/{cfg.num_graphs} graphs after {attempts} attempts; "
                f"valence caps or uniqueness unsatisfiable for config {cfg!r}")
        rng = np.random.default_rng([seed, attempts])
        attempts += 1
        g = _sample_graph(cfg, rng)
        if g is None or not is_valid(g, rules):
            continue
        if cfg.unique:
            k = canonical_key(g)
            if k in seen:
                continue
            seen.add(k)
        graphs.append(g)
    scores = [graph_score(g, cfg.node_weights, cfg.edge_weights) for g in graphs]
    labels = equal_frequency_labels(scores, cfg.num_classes)
    return LabeledDataset(graphs, labels.tolist(), cfg.num_classes, cfg.a, cfg.b, cfg.n_max, seed)


@dataclass
class Split:
    target: LabeledDataset
    validation: LabeledDataset
    auxiliary: LabeledDataset
    indices: dict = field(default_factory=dict)


def _check_nonempty(parts):
    for name, idx in parts.items():
        if len(idx) == 0:
            raise SplitError(f"{name} split is empty")


def split_random(dataset: LabeledDataset, ratios, seed: int) -> Split:
    ratios = np.asarray(ratios, dtype=float)
    if len(ratios) != 3 or np.any(ratios < 0) or not np.isclose(ratios.sum(), 1.0):
        raise SplitError(f"ratios must be three nonnegative numbers summing to 1, got {ratios.tolist()}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_t = int(round(ratios[0] * n))
    n_v = int(round(ratios[1] * n))
    parts = {"target": perm[:n_t], "validation": perm[n_t:n_t + n_v], "auxiliary": perm[n_t + n_v:]}
    _check_nonempty(parts)
    return Split(*(dataset.subset(sorted(p.tolist())) for p in parts.values()),
                 indices={k: sorted(v.tolist()) for k, v in parts.items()})


def split_cluster_shift(dataset: LabeledDataset, groups: int,
                        encoder: Callable[[list[CategoricalGraph]], np.ndarray],
                        seed: int, target_fraction=0.2, val_fraction=0.25) -> Split:
    """K-means on encoder embeddings; one cluster becomes target+validation."""
    from sklearn.cluster import KMeans

    if groups < 2:
        raise SplitError("cluster_shift needs at least 2 groups")
    if encoder is None:
        raise SplitError("cluster_shift needs an encoder")
    emb = np.asarray(encoder(dataset.graphs), dtype=float)
    km = KMeans(n_clusters=groups, n_init=10, random_state=seed).fit(emb)
    sizes = np.bincount(km.labels_, minlength=groups)
    want = target_fraction * len(dataset)
    chosen = int(np.argmin(np.abs(sizes - want)))
    members = np.flatnonzero(km.labels_ == chosen)
    rest = np.flatnonzero(km.labels_ != chosen)
    perm = np.random.default_rng(seed).permutation(members)
    n_v = int(round(val_fraction * len(members)))
    parts = {"target": np.sort(perm[n_v:]), "validation": np.sort(perm[:n_v]), "auxiliary": rest}
    _check_nonempty(parts)
    return Split(*(dataset.subset(p.tolist()) for p in parts.values()),
                 indices={k: v.tolist() for k, v in parts.items()})


def split_dataset(dataset: LabeledDataset, mode="random", seed=0, ratios=(0.2, 0.1, 0.7),
                  groups=8, encoder=None, **kwargs) -> Split:
    if mode == "random":
        return split_random(dataset, ratios, seed)
    if mode == "cluster_shift":
        return split_cluster_shift(dataset, groups, encoder, seed, **kwargs)
    raise SplitError(f"unknown split mode {mode!r}")
