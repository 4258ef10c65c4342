"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; setting
``MELTGRAPH_KERNELS=python`` forces the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("MELTGRAPH_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def segment_sum(values, segment_of, n_segments):
    """Sum rows of ``values`` into ``n_segments`` buckets given by ``segment_of``."""
    return _impl.segment_sum(values, segment_of, int(n_segments))


def segment_max(values, segment_of, n_segments):
    """Per-bucket maximum of rows of ``values``; empty buckets hold 0."""
    return _impl.segment_max(values, segment_of, int(n_segments))


def knn(points, k):
    """(N, k) neighbour indices by increasing distance, ties to lower index."""
    return _impl.knn(points, int(k))


def backends():
    """Mapping of available backend name -> module, for benchmarks and tests."""
    found = {"python": _kernels_py}
    try:
        from . import _ckernels
        found["cython"] = _ckernels
    except ImportError:
        pass
    return found


def attention_forward(q, k, v, etab, etype, src, dst, n_heads):
    """Fused edge-featured attention; see ``_kernels_py.attention_forward``."""
    return _impl.attention_forward(q, k, v, etab, etype, src, dst, int(n_heads))


def attention_backward(g, q, k, v, etab, etype, alpha, src, dst, n_heads):
    return _impl.attention_backward(g, q, k, v, etab, etype, alpha, src, dst, int(n_heads))
