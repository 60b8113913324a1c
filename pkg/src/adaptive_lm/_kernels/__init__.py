"""Hot kernels, compiled when available.

The Cython extension is used when it was built and ``ADAPTIVE_LM_PURE_PYTHON``
is not set; otherwise the numpy/Python reference versions are loaded.
"""
import os

from . import _pure

if os.environ.get("ADAPTIVE_LM_PURE_PYTHON"):
    _impl = _pure
else:
    try:
        from . import _ext as _impl
    except ImportError:
        _impl = _pure

BACKEND = "cython" if _impl is not _pure else "python"

scatter_add_rows = _impl.scatter_add_rows
BpeSegmenter = _impl.BpeSegmenter

__all__ = ["BACKEND", "BpeSegmenter", "scatter_add_rows"]
