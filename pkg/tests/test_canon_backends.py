import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import random_graph
from graphsteal import canon
from graphsteal.canon import CanonicalizationBudgetError, canonical_key_arrays

compiled = pytest.mark.skipif(canon.BACKEND != "cython", reason="compiled kernel not built")


def _triangles(k):
    n = 3 * k
    e = np.zeros((n, n), np.int64)
    for c in range(k):
        for i in range(3):
            for j in range(i + 1, 3):
                e[3 * c + i, 3 * c + j] = e[3 * c + j, 3 * c + i] = 1
    return np.zeros(n, np.int64), e


@compiled
def test_backends_emit_identical_bytes():
    rng = np.random.default_rng(11)
    for _ in range(500):
        g = random_graph(rng, int(rng.integers(2, 12)), int(rng.integers(1, 5)), int(rng.integers(2, 4)),
                         p=float(rng.random()))
        py = canonical_key_arrays(g.nodes, g.edges, g.b, backend="python")
        cy = canonical_key_arrays(g.nodes, g.edges, g.b, backend="cython")
        assert py == cy


@compiled
def test_backends_agree_on_symmetric_graphs():
    nodes, e = _triangles(4)
    assert canonical_key_arrays(nodes, e, 2, backend="python") == canonical_key_arrays(nodes, e, 2, backend="cython")


@pytest.mark.parametrize("backend", ["python", "cython"])
def test_budget_exceeded_raises(backend):
    if backend == "cython" and canon.BACKEND != "cython":
        pytest.skip("compiled kernel not built")
    nodes, e = _triangles(4)
    with pytest.raises(CanonicalizationBudgetError):
        canonical_key_arrays(nodes, e, 2, max_leaves=5, backend=backend)


def test_pure_mode_env_selects_python():
    env = dict(os.environ, GRAPHSTEAL_PURE="1")
    out = subprocess.run([sys.executable, "-c", "from graphsteal import canon; print(canon.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
