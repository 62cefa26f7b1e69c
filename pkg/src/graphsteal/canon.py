"""Canonical keys for categorical graphs.

The compiled kernel is used when it was built and ``GRAPHSTEAL_PURE`` is
unset; otherwise the pure-Python implementation runs. Both emit identical
bytes, so keys are interchangeable across installs.
"""

import os

from . import _canon_py

try:
    if os.environ.get("GRAPHSTEAL_PURE"):
        raise ImportError
    from . import _canon_ext as _kernel
    BACKEND = "cython"
except ImportError:
    _kernel = _canon_py
    BACKEND = "python"

MAX_LEAVES = 100_000


class CanonicalizationBudgetError(RuntimeError):
    """Raised instead of ever returning a key from an incomplete search."""


def canonical_key_arrays(nodes, edges, b, max_leaves=MAX_LEAVES, backend=None):
    impl = _kernel if backend is None else {"python": _canon_py, "cython": _kernel}[backend]
    try:
        return impl.canonical_key(nodes, edges, b, max_leaves)
    except (_canon_py.BudgetExceeded, getattr(_kernel, "BudgetExceeded", _canon_py.BudgetExceeded)) as exc:
        raise CanonicalizationBudgetError(str(exc)) from None
