"""Pure-Python canonical labeling.

Individualization-refinement search: color refinement on (node category,
per-edge-category neighbour color counts), branching on the first
non-singleton cell, keeping the lexicographically smallest serialization
over all leaves. Twin vertices in a cell are explored once.

The Cython kernel in ``_canon_ext.pyx`` implements the same procedure and
must produce identical bytes.
"""

import numpy as np


class BudgetExceeded(RuntimeError):
    pass


def _refine(colors, edges, n, b):
    # colors: int array of ranks in [0, n)
    while True:
        onehot = np.zeros((n, n), dtype=np.int64)
        onehot[np.arange(n), colors] = 1
        blocks = [colors[:, None]]
        for c in range(1, b):
            blocks.append((edges == c).astype(np.int64) @ onehot)
        sig = np.concatenate(blocks, axis=1)
        uniq, new = np.unique(sig, axis=0, return_inverse=True)
        new = new.reshape(-1)
        if len(uniq) == len(np.unique(colors)):
            return new
        colors = new


def _serialize(nodes, edges, order):
    n = len(order)
    iu, ju = np.triu_indices(n, k=1)
    e = edges[np.ix_(order, order)]
    return bytes([n]) + bytes(nodes[order].tolist()) + bytes(e[iu, ju].tolist())


def _twins(edges, u, v, n):
    for w in range(n):
        if w != u and w != v and edges[u, w] != edges[v, w]:
            return False
    return True


def canonical_key(nodes, edges, b, max_leaves=100_000):
    nodes = np.asarray(nodes, dtype=np.int64)
    edges = np.asarray(edges, dtype=np.int64)
    n = len(nodes)
    _, init = np.unique(nodes, return_inverse=True)
    best = None
    leaves = 0
    stack = [init.reshape(-1)]
    while stack:
        colors = _refine(stack.pop(), edges, n, b)
        counts = np.bincount(colors, minlength=n)
        if counts.max() == 1:
            leaves += 1
            if leaves > max_leaves:
                raise BudgetExceeded(f"canonical labeling exceeded {max_leaves} leaves (n={n})")
            order = np.argsort(colors)
            s = _serialize(nodes, edges, order)
            if best is None or s < best:
                best = s
            continue
        cell_color = int(np.flatnonzero(counts > 1)[0])
        cell = np.flatnonzero(colors == cell_color)
        reps = []
        for v in cell:
            if any(_twins(edges, u, v, n) for u in reps):
                continue
            reps.append(v)
        for v in reversed(reps):
            child = colors * 2 + 1
            child[v] = colors[v] * 2
            _, child = np.unique(child, return_inverse=True)
            stack.append(child.reshape(-1))
    return best
