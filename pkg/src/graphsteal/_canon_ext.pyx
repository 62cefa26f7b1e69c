# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled canonical labeling kernel (same algorithm and bytes as _canon_py)."""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free
from libc.string cimport memcmp, memcpy

cnp.import_array()

cdef enum:
    MAXN = 64


class BudgetExceeded(RuntimeError):
    pass


cdef int _cmp_sig(long *sig, int w, int u, int v) noexcept nogil:
    cdef int k
    cdef long *a = sig + u * w
    cdef long *b = sig + v * w
    for k in range(w):
        if a[k] < b[k]:
            return -1
        if a[k] > b[k]:
            return 1
    return 0


cdef int _rank(long *sig, int w, int n, int *colors, int *order) noexcept nogil:
    """Rank rows of sig lexicographically into colors; return #distinct."""
    cdef int i, j, t, k
    for i in range(n):
        order[i] = i
    # insertion sort, stable
    for i in range(1, n):
        t = order[i]
        j = i - 1
        while j >= 0 and _cmp_sig(sig, w, order[j], t) > 0:
            order[j + 1] = order[j]
            j -= 1
        order[j + 1] = t
    k = 0
    colors[order[0]] = 0
    for i in range(1, n):
        if _cmp_sig(sig, w, order[i - 1], order[i]) != 0:
            k += 1
        colors[order[i]] = k
    return k + 1


cdef int _refine(int *colors, int *edges, int n, int b, long *sig, int *order) noexcept nogil:
    cdef int w = 1 + (b - 1) * n
    cdef int i, j, c, k, ncol, nnew
    # current number of distinct colors
    ncol = 0
    for i in range(n):
        if colors[i] + 1 > ncol:
            ncol = colors[i] + 1
    while True:
        for i in range(n * w):
            sig[i] = 0
        for i in range(n):
            sig[i * w] = colors[i]
            for j in range(n):
                c = edges[i * n + j]
                if c > 0 and j != i:
                    sig[i * w + 1 + (c - 1) * n + colors[j]] += 1
        nnew = _rank(sig, w, n, colors, order)
        if nnew == ncol:
            return ncol
        ncol = nnew


cdef void _serialize(int *nodes, int *edges, int n, int *colors, unsigned char *out) noexcept nogil:
    cdef int pos[MAXN]
    cdef int i, j, p
    for i in range(n):
        pos[colors[i]] = i
    out[0] = <unsigned char> n
    for i in range(n):
        out[1 + i] = <unsigned char> nodes[pos[i]]
    p = 1 + n
    for i in range(n):
        for j in range(i + 1, n):
            out[p] = <unsigned char> edges[pos[i] * n + pos[j]]
            p += 1


cdef bint _twins(int *edges, int n, int u, int v) noexcept nogil:
    cdef int x
    for x in range(n):
        if x != u and x != v and edges[u * n + x] != edges[v * n + x]:
            return False
    return True


cdef class _Search:
    cdef int n, b, keylen
    cdef int *nodes
    cdef int *edges
    cdef long *sig
    cdef int *order
    cdef unsigned char *best
    cdef unsigned char *cur
    cdef bint have_best
    cdef long leaves, max_leaves

    def __cinit__(self, int n, int b, long max_leaves):
        self.n = n
        self.b = b
        self.keylen = 1 + n + n * (n - 1) // 2
        self.nodes = <int *> malloc(n * sizeof(int))
        self.edges = <int *> malloc(n * n * sizeof(int))
        self.sig = <long *> malloc(n * (1 + (b - 1) * n) * sizeof(long))
        self.order = <int *> malloc(n * sizeof(int))
        self.best = <unsigned char *> malloc(self.keylen)
        self.cur = <unsigned char *> malloc(self.keylen)
        self.have_best = False
        self.leaves = 0
        self.max_leaves = max_leaves

    def __dealloc__(self):
        free(self.nodes)
        free(self.edges)
        free(self.sig)
        free(self.order)
        free(self.best)
        free(self.cur)

    cdef int visit(self, int *colors) except -1:
        cdef int n = self.n
        cdef int ncol = _refine(colors, self.edges, n, self.b, self.sig, self.order)
        cdef int counts[MAXN]
        cdef int child[MAXN]
        cdef int reps[MAXN]
        cdef int nreps = 0
        cdef int i, v, cell, u
        cdef bint dup
        if ncol == n:
            self.leaves += 1
            if self.leaves > self.max_leaves:
                raise BudgetExceeded(
                    f"canonical labeling exceeded {self.max_leaves} leaves (n={n})")
            _serialize(self.nodes, self.edges, n, colors, self.cur)
            if not self.have_best or memcmp(self.cur, self.best, self.keylen) < 0:
                memcpy(self.best, self.cur, self.keylen)
                self.have_best = True
            return 0
        for i in range(n):
            counts[i] = 0
        for i in range(n):
            counts[colors[i]] += 1
        cell = 0
        while counts[cell] < 2:
            cell += 1
        for v in range(n):
            if colors[v] != cell:
                continue
            dup = False
            for u in range(nreps):
                if _twins(self.edges, n, reps[u], v):
                    dup = True
                    break
            if dup:
                continue
            reps[nreps] = v
            nreps += 1
        for u in range(nreps):
            v = reps[u]
            for i in range(n):
                child[i] = colors[i] * 2 + 1
            child[v] = colors[v] * 2
            _compact(child, n)
            self.visit(child)
        return 0


cdef void _compact(int *c, int n) noexcept nogil:
    # re-rank values to 0..k-1 preserving order
    cdef int seen[2 * MAXN + 2]
    cdef int i, k
    for i in range(2 * n + 2):
        seen[i] = -1
    for i in range(n):
        seen[c[i]] = 1
    k = 0
    for i in range(2 * n + 2):
        if seen[i] == 1:
            seen[i] = k
            k += 1
    for i in range(n):
        c[i] = seen[c[i]]


def canonical_key(nodes, edges, int b, long max_leaves=100_000):
    cdef cnp.ndarray[cnp.int32_t, ndim=1] nd = np.ascontiguousarray(nodes, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=2] ed = np.ascontiguousarray(edges, dtype=np.int32)
    cdef int n = nd.shape[0]
    cdef int i
    if n > MAXN:
        raise ValueError(f"compiled kernel supports at most {MAXN} nodes")
    cdef _Search s = _Search(n, b, max_leaves)
    memcpy(s.nodes, &nd[0], n * sizeof(int))
    memcpy(s.edges, &ed[0, 0], n * n * sizeof(int))
    cdef int colors[MAXN]
    # initial colors: rank of node category
    _, init = np.unique(nd, return_inverse=True)
    init = init.reshape(-1)
    for i in range(n):
        colors[i] = init[i]
    s.visit(colors)
    return bytes(s.best[:s.keylen])
