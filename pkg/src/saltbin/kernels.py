"""Kernel selection: compiled extension when importable, numpy otherwise.

Set ``SALTBIN_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py as fallback

compiled = None
if os.environ.get("SALTBIN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled
    except ImportError:
        compiled = None

BACKEND = "cython" if compiled is not None else "numpy"
_impl = compiled if compiled is not None else fallback


def sign_matmul(u, plane, n):
    return _impl.sign_matmul(np.ascontiguousarray(u, dtype=np.float64),
                             np.ascontiguousarray(plane, dtype=np.uint8), int(n))


def nibble_matmul(v, nib, n):
    return _impl.nibble_matmul(np.ascontiguousarray(v, dtype=np.float64),
                               np.ascontiguousarray(nib, dtype=np.uint8), int(n))
