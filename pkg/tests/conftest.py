import itertools

import numpy as np
import pytest

from graphsteal.graphdata import CategoricalGraph, GenConfig, gen_synthetic_dataset


def random_graph(rng, n, a, b, p=0.5):
    nodes = rng.integers(0, a, size=n)
    e = np.zeros((n, n), dtype=np.int64)
    iu, ju = np.triu_indices(n, 1)
    on = rng.random(len(iu)) < p
    e[iu, ju] = np.where(on, rng.integers(1, b, size=len(iu)), 0)
    return CategoricalGraph(nodes, e + e.T, a, b)


def brute_isomorphic(g, h):
    """Factorial-time isomorphism test respecting node and edge categories."""
    if g.n != h.n or sorted(g.nodes) != sorted(h.nodes):
        return False
    for perm in itertools.permutations(range(g.n)):
        p = np.array(perm)
        if np.array_equal(g.nodes[p], h.nodes) and np.array_equal(g.edges[np.ix_(p, p)], h.edges):
            return True
    return False


@pytest.fixture(scope="session")
def small_dataset():
    cfg = GenConfig(num_graphs=60, n_min=4, n_max=6, a=3, b=2, max_degree=(3, 2, 1),
                    node_weights=(1, 2, 3), edge_weights=(0, 1), num_classes=2, max_retries=400)
    return gen_synthetic_dataset(cfg, 3)
