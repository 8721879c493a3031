"""Select the compiled kernels when available, else the numpy fallback.

Set ``MFMC_BACKEND=python`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("MFMC_BACKEND", "").lower() != "python":
    try:
        from . import _ext as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

find_splits = _impl.find_splits
tree_shap = _impl.tree_shap
midpoint = _impl.midpoint


def available_backends() -> dict:
    """Name -> kernel module for every importable backend."""
    out = {"python": _pykernels}
    try:
        from . import _ext
        out["cython"] = _ext
    except ImportError:
        pass
    return out
